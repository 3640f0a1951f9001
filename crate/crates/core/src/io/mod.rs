//! File formats: Netpbm images, checkpoints, and the numeric formatting
//! shared by the text formats.

pub mod checkpoint;
pub mod pnm;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use pnm::{read_depth, read_image, write_depth, write_image};

/// Format `v` with `digits` significant digits the way C's `%g` does:
/// fixed notation unless the exponent is below -4 or at least `digits`,
/// trailing zeros removed.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -4 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::format_sig;

    #[test]
    fn matches_c_percent_g() {
        let cases = [
            (0.6, "0.6"),
            (1.8, "1.8"),
            (1.0, "1"),
            (0.001, "0.001"),
            (0.0005, "0.0005"),
            (0.00025, "0.00025"),
            (1.234567891, "1.23457"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e+06"),
            (0.0000123456, "1.23456e-05"),
            (-2.5, "-2.5"),
            (100.0, "100"),
            (0.0, "0"),
        ];
        for (v, want) in cases {
            assert_eq!(format_sig(v, 6), want, "{v}");
        }
    }
}
