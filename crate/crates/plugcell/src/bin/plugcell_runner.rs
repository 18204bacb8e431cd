//! The in-sandbox plugin supervisor. Exec'd by the sandbox builder as the
//! de-privileged runner image; everything interesting lives in
//! `plugcell::runner`.

fn main() {
    std::process::exit(plugcell::runner::runner_main());
}
