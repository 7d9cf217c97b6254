use std::process::ExitCode;

fn main() -> ExitCode {
    attn_align::cli::main_with_args(std::env::args_os())
}
