fn main() -> std::process::ExitCode {
    dmfnet::cli::main()
}
