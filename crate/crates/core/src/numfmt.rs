//! Number formatting shared by every text output.

/// Formats like C's `%.9g`: nine significant digits, trailing zeros dropped,
/// scientific notation outside `[1e-4, 1e9)`.
pub fn sig9(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        strip_zeros(format!("{:.*}", decimals, x))
    } else {
        let m = strip_zeros(mantissa.to_string());
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn strip_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::sig9;

    #[test]
    fn matches_printf_g() {
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(1.0), "1");
        assert_eq!(sig9(0.1), "0.1");
        assert_eq!(sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(sig9(2.0f64.sqrt().recip()), "0.707106781");
        assert_eq!(sig9(-123.456), "-123.456");
        assert_eq!(sig9(123456789.0), "123456789");
        assert_eq!(sig9(1234567890.0), "1.23456789e+09");
        assert_eq!(sig9(0.0000123), "1.23e-05");
        assert_eq!(sig9(0.000123), "0.000123");
        assert_eq!(sig9(0.0368), "0.0368");
    }

    #[test]
    fn reparse_is_stable() {
        for x in [0.1234567891234, 98765.4321, 1e-12, 3.0e15, -7.5] {
            let once = sig9(x);
            let twice = sig9(once.parse().unwrap());
            assert_eq!(once, twice);
        }
    }
}
