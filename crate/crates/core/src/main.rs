fn main() {
    std::process::exit(ssm_peft::cli::cli_dispatch());
}
