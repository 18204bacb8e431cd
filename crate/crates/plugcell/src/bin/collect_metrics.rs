//! Reference collector executable (runner stdout contract).

use plugcell::collectors::{run_collector, GuestView};

fn main() {
    // --args-json is accepted per the plugin contract; the view comes from
    // the runner-provided environment.
    let view = GuestView::from_env();
    let records = run_collector("metrics", &view).expect("collector name is fixed");
    let mut out = String::new();
    for rec in records {
        out.push_str(&rec.to_line());
        out.push('\n');
    }
    print!("{out}");
}
