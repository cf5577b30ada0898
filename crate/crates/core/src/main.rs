fn main() -> std::process::ExitCode {
    pnn::cli::main()
}
