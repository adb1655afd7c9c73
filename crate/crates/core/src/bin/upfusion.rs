fn main() -> std::process::ExitCode {
    upfusion::cli::main()
}
