/// Formats a raw parameter count in millions with three decimals, rounding
/// half up: `8202` → `"0.008"`, `14349` → `"0.014"`.
pub fn format_millions(count: u64) -> String {
    let thousandths = (count + 500) / 1000;
    format!("{}.{:03}", thousandths / 1000, thousandths % 1000)
}

/// Signed variant for ledger deltas.
pub fn format_millions_delta(delta: i64) -> String {
    let sign = if delta < 0 { "-" } else { "+" };
    format!("{sign}{}", format_millions(delta.unsigned_abs()))
}
