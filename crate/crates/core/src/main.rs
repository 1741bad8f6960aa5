fn main() -> std::process::ExitCode {
    embsum::cli::main()
}
