//! Thin process wrapper over the library's command-line surface.

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(rtdlab::cli::run(&args));
}
