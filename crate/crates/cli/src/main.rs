fn main() -> std::process::ExitCode {
    annserve_cli::main_with_args()
}
