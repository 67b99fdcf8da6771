//! Locale-independent CSV number formatting.

/// Six significant digits, trailing zeros dropped.
///
/// Magnitudes below `1e-3` or from `1e6` up use scientific notation
/// (`1.5e-4`); exact zero prints as `0`.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exponent = x.abs().log10().floor() as i32;
    if x.abs() < 1e-3 || exponent >= 6 {
        let text = format!("{x:.5e}");
        let (mantissa, exp) = text
            .split_once('e')
            .expect("scientific format has an exponent");
        format!("{}e{exp}", trim_zeros(mantissa))
    } else {
        let decimals = (5 - exponent).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Join already-formatted fields into one CSV line.
pub fn csv_row<I, S>(fields: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    fields
        .into_iter()
        .map(|f| f.as_ref().to_string())
        .collect::<Vec<_>>()
        .join(",")
}
