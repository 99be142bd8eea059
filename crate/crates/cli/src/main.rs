use std::io::{self, Write};
use std::process::ExitCode;

fn main() -> ExitCode {
    let stdout = io::stdout();
    let mut out = io::BufWriter::new(stdout.lock());
    let code = pothole_cli::run(std::env::args_os(), &mut out, &mut io::stderr());
    if out.flush().is_err() {
        return ExitCode::from(pothole_cli::EXIT_RUNTIME as u8);
    }
    ExitCode::from(code as u8)
}
