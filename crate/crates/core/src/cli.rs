//! Command-line entry point. Exit codes: 0 success, 1 usage or input
//! error, 2 internal error.

/// Parses arguments from the environment and runs the selected command.
pub fn run() -> i32 {
    eprintln!("CLI not wired up yet");
    2
}
