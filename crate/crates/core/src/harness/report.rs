//! `report`: merge run CSVs and lay them out as scheme comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{HarnessError, CSV_HEADER};

/// Concatenate CSV texts under one header, dropping duplicate rows and
/// sorting rows by their leading key columns.
pub fn merge_csv(texts: &[String]) -> Result<String, HarnessError> {
    let mut rows: BTreeMap<(String, String, u64, u64, String), String> = BTreeMap::new();
    for text in texts {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == CSV_HEADER => {}
            other => {
                return Err(HarnessError::Csv(format!(
                    "unexpected header {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != CSV_HEADER.split(',').count() {
                return Err(HarnessError::Csv(format!("wrong column count: {line}")));
            }
            let num = |s: &str| {
                s.parse::<u64>()
                    .map_err(|_| HarnessError::Csv(format!("bad number {s:?} in {line}")))
            };
            let key = (
                f[1].to_string(),
                f[0].to_string(),
                num(f[2])?,
                num(f[3])?,
                f[4].to_string(),
            );
            rows.insert(key, line.to_string());
        }
    }
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for line in rows.values() {
        out.push_str(line);
        out.push('\n');
    }
    Ok(out)
}

/// Mean latency of every scheme side by side, one table row per mix ×
/// value size × client count, from the `all` rows of a merged CSV.
pub fn comparison_table(csv: &str) -> Result<String, HarnessError> {
    type Key = (String, u64, u64);
    let mut cells: BTreeMap<Key, BTreeMap<String, (f64, f64, f64)>> = BTreeMap::new();
    let mut schemes: Vec<String> = Vec::new();
    for line in csv.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 15 || f[4] != "all" {
            continue;
        }
        let p = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|_| HarnessError::Csv(format!("bad number {:?} in {line}", f[i])))
        };
        let key = (f[1].to_string(), p(2)? as u64, p(3)? as u64);
        if !schemes.iter().any(|s| s == f[0]) {
            schemes.push(f[0].to_string());
        }
        cells
            .entry(key)
            .or_default()
            .insert(f[0].to_string(), (p(6)?, p(8)?, p(13)?));
    }
    let mut out = String::new();
    write!(out, "{:<12} {:>6} {:>3}", "mix", "value", "cl").unwrap();
    for s in &schemes {
        write!(
            out,
            " | {:>10} {:>12} {:>7}",
            format!("{s} ns"),
            "ops/s",
            "cpu/op"
        )
        .unwrap();
    }
    out.push('\n');
    for ((mix, value, clients), by_scheme) in &cells {
        write!(out, "{mix:<12} {value:>6} {clients:>3}").unwrap();
        for s in &schemes {
            match by_scheme.get(s) {
                Some((lat, tput, cpu)) => {
                    write!(out, " | {lat:>10.1} {tput:>12.1} {cpu:>7.3}").unwrap()
                }
                None => write!(out, " | {:>10} {:>12} {:>7}", "-", "-", "-").unwrap(),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(scheme: &str, kind: &str, lat: f64) -> String {
        format!(
            "{scheme},ycsb_a,64,1,{kind},10,{lat:.1},2.000,1000.0,100,10.000,120,5,0.5000,2.0000"
        )
    }

    #[test]
    fn merges_and_tabulates() {
        let a = format!(
            "{CSV_HEADER}\n{}\n{}\n",
            row("erda", "all", 3000.0),
            row("erda", "get", 2000.0)
        );
        let b = format!("{CSV_HEADER}\n{}\n", row("redo", "all", 5000.0));
        let merged = merge_csv(&[a.clone(), b, a]).unwrap();
        assert_eq!(merged.lines().count(), 4);
        let table = comparison_table(&merged).unwrap();
        assert!(
            table.contains("3000.0") && table.contains("5000.0"),
            "{table}"
        );
        assert_eq!(table.lines().count(), 2);
    }

    #[test]
    fn rejects_foreign_csv() {
        assert!(merge_csv(&["a,b\n1,2\n".to_string()]).is_err());
        let short = format!("{CSV_HEADER}\nerda,ycsb_a\n");
        assert!(merge_csv(&[short]).is_err());
    }
}
