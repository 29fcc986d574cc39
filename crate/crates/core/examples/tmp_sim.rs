use telelens::{config::Config, bench};
fn main() {
    let cfg = Config::default();
    let r = bench::bench(&cfg, &[]).unwrap();
    println!("{}", r.to_text());
}
