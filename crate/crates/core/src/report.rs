//! Tab-separated text reports: per-token credit, connectivity histogram and
//! cluster assignments. Header lines start with `# key value`; all reals are
//! written with nine significant digits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::credit::WeightingMode;
use crate::numfmt::sig9;
use crate::pipeline::SequenceCredit;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing header field {0:?}")]
    MissingField(&'static str),
    #[error("I/O failure on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn parse_err(line: usize, message: impl Into<String>) -> ReportError {
    ReportError::Parse {
        line: line + 1,
        message: message.into(),
    }
}

/// Splits a report into `# key value` headers and data rows, dropping the
/// column-name line that must follow the headers.
fn split_report<'a>(
    text: &'a str,
    columns: &str,
) -> Result<(BTreeMap<&'a str, &'a str>, Vec<(usize, Vec<&'a str>)>), ReportError> {
    let mut headers = BTreeMap::new();
    let mut rows = Vec::new();
    let mut seen_columns = false;
    for (i, line) in text.lines().enumerate() {
        if let Some(h) = line.strip_prefix('#') {
            let h = h.trim();
            let (k, v) = h.split_once(' ').unwrap_or((h, ""));
            headers.insert(k, v.trim());
        } else if line.trim().is_empty() {
            continue;
        } else if !seen_columns {
            if line != columns {
                return Err(parse_err(i, format!("expected column line {columns:?}")));
            }
            seen_columns = true;
        } else {
            rows.push((i, line.split('\t').collect()));
        }
    }
    if !seen_columns {
        return Err(parse_err(text.lines().count(), "no column line"));
    }
    Ok((headers, rows))
}

fn field<T: std::str::FromStr>(line: usize, s: &str) -> Result<T, ReportError> {
    s.parse().map_err(|_| parse_err(line, format!("cannot parse {s:?}")))
}

fn header<T: std::str::FromStr>(headers: &BTreeMap<&str, &str>, key: &'static str) -> Result<T, ReportError> {
    let v = headers.get(key).ok_or(ReportError::MissingField(key))?;
    v.parse().map_err(|_| ReportError::Parse {
        line: 0,
        message: format!("bad {key} value {v:?}"),
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), ReportError> {
    std::fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_file(path: &Path) -> Result<String, ReportError> {
    std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CreditRow {
    pub token: usize,
    pub connectivity: f64,
    pub phi: f64,
    pub cluster: usize,
    pub cluster_weight: f64,
    pub token_weight: f64,
    pub token_adv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CreditReport {
    pub mode: WeightingMode,
    pub seq_adv: f64,
    pub clusters: usize,
    pub rows: Vec<CreditRow>,
}

impl CreditReport {
    const COLUMNS: &'static str = "token\tconnectivity\tphi\tcluster\tcluster_weight\ttoken_weight\ttoken_adv";

    pub fn from_sequence(seq: &SequenceCredit, mode: WeightingMode, seq_adv: f64) -> Self {
        let rows = (0..seq.gen_len())
            .map(|t| {
                let k = seq.clustering.cluster_of(t);
                CreditRow {
                    token: t,
                    connectivity: seq.connectivity.0[t],
                    phi: seq.phi.0[t],
                    cluster: k,
                    cluster_weight: seq.cluster_weights.0[k],
                    token_weight: seq.token_weights[t],
                    token_adv: seq.token_weights[t] * seq_adv,
                }
            })
            .collect();
        Self {
            mode,
            seq_adv,
            clusters: seq.clustering.k(),
            rows,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# credit_report");
        let _ = writeln!(s, "# mode {}", self.mode);
        let _ = writeln!(s, "# seq_adv {}", sig9(self.seq_adv));
        let _ = writeln!(s, "# tokens {}", self.rows.len());
        let _ = writeln!(s, "# clusters {}", self.clusters);
        let _ = writeln!(s, "{}", Self::COLUMNS);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.token,
                sig9(r.connectivity),
                sig9(r.phi),
                r.cluster,
                sig9(r.cluster_weight),
                sig9(r.token_weight),
                sig9(r.token_adv)
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ReportError> {
        let (headers, rows) = split_report(text, Self::COLUMNS)?;
        let tokens: usize = header(&headers, "tokens")?;
        let mut out = Vec::with_capacity(rows.len());
        for (line, cols) in rows {
            if cols.len() != 7 {
                return Err(parse_err(line, format!("expected 7 columns, got {}", cols.len())));
            }
            out.push(CreditRow {
                token: field(line, cols[0])?,
                connectivity: field(line, cols[1])?,
                phi: field(line, cols[2])?,
                cluster: field(line, cols[3])?,
                cluster_weight: field(line, cols[4])?,
                token_weight: field(line, cols[5])?,
                token_adv: field(line, cols[6])?,
            });
        }
        if out.len() != tokens {
            return Err(parse_err(0, format!("header says {tokens} tokens, found {}", out.len())));
        }
        Ok(Self {
            mode: header::<String>(&headers, "mode")?
                .parse()
                .map_err(|e: String| parse_err(0, e))?,
            seq_adv: header(&headers, "seq_adv")?,
            clusters: header(&headers, "clusters")?,
            rows: out,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ReportError> {
        write_file(path.as_ref(), &self.to_text())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReportError> {
        Self::from_text(&read_file(path.as_ref())?)
    }
}

/// Linear-interpolation quantile of `values` at `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Tokens above the `(1 - p)` quantile of connectivity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorStats {
    pub threshold: f64,
    pub above: usize,
    pub total: usize,
}

impl AnchorStats {
    pub fn compute(connectivity: &[f64], p: f64) -> Self {
        let threshold = quantile(connectivity, 1.0 - p);
        Self {
            threshold,
            above: connectivity.iter().filter(|&&c| c > threshold).count(),
            total: connectivity.len(),
        }
    }

    pub fn fraction(&self) -> f64 {
        self.above as f64 / self.total as f64
    }
}

/// Equal-width histogram of connectivity over `[0, max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub anchor_p: f64,
    pub anchors: AnchorStats,
}

impl Histogram {
    const COLUMNS: &'static str = "bin_lo\tbin_hi\tcount";

    pub fn compute(connectivity: &[f64], bins: usize, anchor_p: f64) -> Self {
        assert!(bins > 0, "histogram needs at least one bin");
        let max = connectivity.iter().cloned().fold(0.0f64, f64::max);
        let hi = if max > 0.0 { max } else { 1.0 };
        let width = hi / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|b| if b == bins { hi } else { b as f64 * width }).collect();
        let mut counts = vec![0usize; bins];
        for &c in connectivity {
            let b = ((c / width).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self {
            edges,
            counts,
            anchor_p,
            anchors: AnchorStats::compute(connectivity, anchor_p),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let a = &self.anchors;
        let _ = writeln!(s, "# connectivity_histogram");
        let _ = writeln!(s, "# tokens {}", a.total);
        let _ = writeln!(s, "# bins {}", self.counts.len());
        let _ = writeln!(s, "# anchor_p {}", sig9(self.anchor_p));
        let _ = writeln!(s, "# threshold {}", sig9(a.threshold));
        let _ = writeln!(s, "# above {}", a.above);
        let _ = writeln!(s, "# anchor_fraction {}", sig9(a.fraction()));
        let _ = writeln!(s, "{}", Self::COLUMNS);
        for (b, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{}\t{}\t{}", sig9(self.edges[b]), sig9(self.edges[b + 1]), c);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ReportError> {
        let (headers, rows) = split_report(text, Self::COLUMNS)?;
        let bins: usize = header(&headers, "bins")?;
        if rows.len() != bins {
            return Err(parse_err(0, format!("header says {bins} bins, found {}", rows.len())));
        }
        let mut edges = Vec::with_capacity(bins + 1);
        let mut counts = Vec::with_capacity(bins);
        for (i, (line, cols)) in rows.iter().enumerate() {
            if cols.len() != 3 {
                return Err(parse_err(*line, format!("expected 3 columns, got {}", cols.len())));
            }
            let lo: f64 = field(*line, cols[0])?;
            if i == 0 {
                edges.push(lo);
            } else if lo != edges[i] {
                return Err(parse_err(*line, "bins are not contiguous"));
            }
            edges.push(field(*line, cols[1])?);
            counts.push(field(*line, cols[2])?);
        }
        Ok(Self {
            edges,
            counts,
            anchor_p: header(&headers, "anchor_p")?,
            anchors: AnchorStats {
                threshold: header(&headers, "threshold")?,
                above: header(&headers, "above")?,
                total: header(&headers, "tokens")?,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ReportError> {
        write_file(path.as_ref(), &self.to_text())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReportError> {
        Self::from_text(&read_file(path.as_ref())?)
    }
}

/// Cluster assignment with its quality figures.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentReport {
    pub k: usize,
    pub edge_cut: f64,
    pub balance: f64,
    pub assignment: Vec<usize>,
}

impl AssignmentReport {
    const COLUMNS: &'static str = "token\tcluster";

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# partition");
        let _ = writeln!(s, "# tokens {}", self.assignment.len());
        let _ = writeln!(s, "# k {}", self.k);
        let _ = writeln!(s, "# edge_cut {}", sig9(self.edge_cut));
        let _ = writeln!(s, "# balance {}", sig9(self.balance));
        let _ = writeln!(s, "{}", Self::COLUMNS);
        for (t, c) in self.assignment.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{c}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ReportError> {
        let (headers, rows) = split_report(text, Self::COLUMNS)?;
        let mut assignment = Vec::with_capacity(rows.len());
        for (line, cols) in rows {
            if cols.len() != 2 {
                return Err(parse_err(line, format!("expected 2 columns, got {}", cols.len())));
            }
            let t: usize = field(line, cols[0])?;
            if t != assignment.len() {
                return Err(parse_err(line, format!("token {t} out of order")));
            }
            assignment.push(field(line, cols[1])?);
        }
        let tokens: usize = header(&headers, "tokens")?;
        if tokens != assignment.len() {
            return Err(parse_err(0, format!("header says {tokens} tokens, found {}", assignment.len())));
        }
        Ok(Self {
            k: header(&headers, "k")?,
            edge_cut: header(&headers, "edge_cut")?,
            balance: header(&headers, "balance")?,
            assignment,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ReportError> {
        write_file(path.as_ref(), &self.to_text())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReportError> {
        Self::from_text(&read_file(path.as_ref())?)
    }
}

/// Generic tab-separated table with ordered `# key value` headers, used for
/// ablation and sweep summaries. The first header names the table kind.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub kind: String,
    pub headers: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(kind: &str, columns: &[&str]) -> Self {
        Self {
            kind: kind.to_string(),
            headers: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn header(&self, key: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.kind);
        for (k, v) in &self.headers {
            let _ = writeln!(s, "# {k} {v}");
        }
        let _ = writeln!(s, "{}", self.columns.join("\t"));
        for row in &self.rows {
            let _ = writeln!(s, "{}", row.join("\t"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ReportError> {
        let mut table = Table::default();
        let mut kind_seen = false;
        for (i, line) in text.lines().enumerate() {
            if let Some(h) = line.strip_prefix('#') {
                let h = h.trim();
                if !kind_seen {
                    table.kind = h.to_string();
                    kind_seen = true;
                } else {
                    let (k, v) = h.split_once(' ').unwrap_or((h, ""));
                    table.headers.push((k.to_string(), v.trim().to_string()));
                }
            } else if line.trim().is_empty() {
                continue;
            } else if table.columns.is_empty() {
                table.columns = line.split('\t').map(str::to_string).collect();
            } else {
                let row: Vec<String> = line.split('\t').map(str::to_string).collect();
                if row.len() != table.columns.len() {
                    return Err(parse_err(
                        i,
                        format!("expected {} columns, got {}", table.columns.len(), row.len()),
                    ));
                }
                table.rows.push(row);
            }
        }
        if !kind_seen {
            return Err(ReportError::MissingField("kind"));
        }
        if table.columns.is_empty() {
            return Err(parse_err(text.lines().count(), "no column line"));
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ReportError> {
        write_file(path.as_ref(), &self.to_text())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReportError> {
        Self::from_text(&read_file(path.as_ref())?)
    }
}
