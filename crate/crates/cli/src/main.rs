fn main() -> std::process::ExitCode {
    omni_align_cli::run(std::env::args_os())
}
