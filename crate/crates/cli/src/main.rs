// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    std::process::exit(statetrack_cli::cli::run_cli(std::env::args_os()));
}
