pub mod accountant;
pub mod diagnose;
pub mod fedsim;
pub mod train;

use hero_dp::accountant::PrivacySummary;

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map(|x| format!("{x:.prec$}")).unwrap_or_else(|| "unbounded".into())
}

/// Prints one line per accounting mode.
pub fn print_privacy(summaries: &[PrivacySummary], delta: f64) {
    println!("{:<14} {:>14} {:>14}", "mode", "rho_total", format!("eps@{delta:e}"));
    for s in summaries {
        println!(
            "{:<14} {:>14} {:>14}",
            s.mode.name(),
            fmt_opt(s.rho_total, 6),
            fmt_opt(s.epsilon, 4)
        );
    }
    println!("(no subsampling amplification is applied in any mode)");
}
