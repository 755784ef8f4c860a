//! Prints the built-in default experiment configuration as TOML; handy
//! as a starting point for new experiment files.

fn main() {
    let cfg = fedsim::config::ExperimentConfig::default();
    print!("{}", cfg.to_toml_string().unwrap());
}
