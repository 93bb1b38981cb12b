//! Tab-separated metric tables.

use std::fmt::Write as _;

/// Raw metric values for one object (not yet scaled).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub cd: f64,
    pub hd: f64,
    pub p2f: Option<f64>,
}

/// `%g`-style formatting with `digits` significant digits.
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let p = digits.max(1);
    let sci = format!("{:.*e}", p - 1, x);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= p as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    }
}

/// Header, one row per object and a final mean row; values in units of 1e-3.
/// The P2F column appears only when every row has a value.
pub fn format_metric_table(rows: &[MetricRow]) -> String {
    let with_p2f = !rows.is_empty() && rows.iter().all(|r| r.p2f.is_some());
    let mut s = String::from("object\tCD(1e-3)\tHD(1e-3)");
    if with_p2f {
        s.push_str("\tP2F(1e-3)");
    }
    s.push('\n');
    let line = |s: &mut String, id: &str, cd: f64, hd: f64, p2f: Option<f64>| {
        write!(s, "{id}\t{}\t{}", fmt_sig(cd * 1e3, 6), fmt_sig(hd * 1e3, 6)).unwrap();
        if let Some(p) = p2f.filter(|_| with_p2f) {
            write!(s, "\t{}", fmt_sig(p * 1e3, 6)).unwrap();
        }
        s.push('\n');
    };
    for r in rows {
        line(&mut s, &r.id, r.cd, r.hd, r.p2f);
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let p2f = with_p2f.then(|| mean(&|r| r.p2f.unwrap()));
        line(&mut s, "mean", mean(&|r| r.cd), mean(&|r| r.hd), p2f);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig_digits_match_printf_g() {
        let cases = [
            (0.0, "0"),
            (50000.0, "50000"),
            (0.28, "0.28"),
            (1234567.0, "1.23457e+06"),
            (0.000123456789, "0.000123457"),
            (0.0000123456, "1.23456e-05"),
            (999999.5, "1e+06"),
            (-2.5, "-2.5"),
            (100.0, "100"),
            (4.28, "4.28"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_sig(x, 6), want, "{x}");
        }
    }

    #[test]
    fn table_layout() {
        let rows = vec![
            MetricRow {
                id: "a".into(),
                cd: 0.0,
                hd: 0.0,
                p2f: None,
            },
            MetricRow {
                id: "b".into(),
                cd: 0.05,
                hd: 0.005,
                p2f: None,
            },
        ];
        let t = format_metric_table(&rows);
        assert_eq!(t, "object\tCD(1e-3)\tHD(1e-3)\na\t0\t0\nb\t50\t5\nmean\t25\t2.5\n");
        let with = vec![MetricRow {
            p2f: Some(0.002),
            ..rows[1].clone()
        }];
        assert!(format_metric_table(&with).contains("b\t50\t5\t2\n"));
    }
}
