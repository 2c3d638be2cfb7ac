//! Text formats: problem files, network export blocks and CSV reports.
//!
//! Floats are written in Rust's shortest round-trip form so that identical
//! runs give identical bytes.
//!
//! # Problem files
//!
//! ```text
//! # unstable plant, |u| <= 10
//! [system]
//! A = 4/3 -2/3
//!     1    0
//! B = 0 ; 1
//!
//! [cost]
//! Q = 1 -2/3 ; -2/3 1.5
//! R = 1
//! P = 7.1667 -4.2222 ; -4.2222 4.6852
//! convention = standard
//!
//! [constraints]
//! input_bounds -10 10
//!
//! [horizon]
//! N = 10
//! ```
//!
//! A matrix is `KEY = row`, with further rows either after `;` or on
//! following lines that carry no `=`. Entries may be fractions `p/q`.
//! Repeating `Q` or `R` gives a time-varying sequence. `[constraints]`
//! takes either `input_bounds lo hi` or explicit `G`, `S_u` (default zero)
//! and `w`; without the section the problem is unconstrained.
//!
//! # Export blocks
//!
//! ```text
//! # mpcnet implicit-network v1
//! dims n=2 m=1 N=10 n_c=20
//! W 20 20
//! <20 rows of 20 numbers>
//! ...
//! ```
//!
//! Each block is `NAME rows cols` followed by that many rows. Vectors are
//! stored as single-column blocks.

use std::fmt::Write as _;

use crate::condense::{CondensedQp, CostConvention, InputConstraints, LtiSystem, MpcProblem};
use crate::error::{MpcError, Result};
use crate::implicit::ImplicitNet;
use crate::linalg::Matrix;
use crate::pwa::{PwaRegion, RegionVerdict};
use crate::simulate::{SimulationTrace, SurfacePoint};
use crate::unravel::{ExplicitNet, UnravelTrace};

/// Shortest round-trip decimal, with `-0` folded into `0`.
pub fn fmt_f64(v: f64) -> String {
    format!("{:?}", v + 0.0)
}

fn parse_err(line: usize, msg: impl Into<String>) -> MpcError {
    MpcError::Parse { line, msg: msg.into() }
}

/// A real number or a `p/q` fraction.
pub fn parse_number(tok: &str) -> Option<f64> {
    let v = match tok.split_once('/') {
        Some((p, q)) => {
            let p: f64 = p.parse().ok()?;
            let q: f64 = q.parse().ok()?;
            if q == 0.0 {
                return None;
            }
            p / q
        }
        None => tok.parse().ok()?,
    };
    v.is_finite().then_some(v)
}

fn parse_row(text: &str, line: usize) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| parse_number(t).ok_or_else(|| parse_err(line, format!("bad number `{t}`"))))
        .collect()
}

#[derive(Debug, Default)]
struct RawMatrix {
    line: usize,
    rows: Vec<Vec<f64>>,
}

impl RawMatrix {
    fn push_rows(&mut self, text: &str, line: usize) -> Result<()> {
        for part in text.split(';') {
            if part.trim().is_empty() {
                continue;
            }
            self.rows.push(parse_row(part, line)?);
        }
        Ok(())
    }

    fn build(&self, name: &str) -> Result<Matrix> {
        if self.rows.is_empty() {
            return Err(parse_err(self.line, format!("`{name}` has no entries")));
        }
        Matrix::from_rows(&self.rows)
            .map_err(|_| parse_err(self.line, format!("`{name}` has rows of different length")))
    }

    fn flat(&self) -> Vec<f64> {
        self.rows.concat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Section {
    None,
    System,
    Cost,
    Constraints,
    Horizon,
}

#[derive(Default)]
struct Raw {
    a: Option<RawMatrix>,
    b: Option<RawMatrix>,
    q: Vec<RawMatrix>,
    r: Vec<RawMatrix>,
    p: Option<RawMatrix>,
    g: Option<RawMatrix>,
    s_u: Option<RawMatrix>,
    w: Option<RawMatrix>,
    bounds: Option<(f64, f64, usize)>,
    convention: Option<CostConvention>,
    horizon: Option<(usize, usize)>,
    saw_horizon: bool,
}

impl Raw {
    fn slot(&mut self, key: &str, line: usize) -> Result<&mut RawMatrix> {
        let fresh = || RawMatrix { line, rows: Vec::new() };
        let single = |s: &mut Option<RawMatrix>| -> Result<()> {
            if s.is_some() {
                return Err(parse_err(line, format!("`{key}` given twice")));
            }
            *s = Some(fresh());
            Ok(())
        };
        Ok(match key {
            "A" => {
                single(&mut self.a)?;
                self.a.as_mut().unwrap()
            }
            "B" => {
                single(&mut self.b)?;
                self.b.as_mut().unwrap()
            }
            "P" => {
                single(&mut self.p)?;
                self.p.as_mut().unwrap()
            }
            "G" => {
                single(&mut self.g)?;
                self.g.as_mut().unwrap()
            }
            "S_u" => {
                single(&mut self.s_u)?;
                self.s_u.as_mut().unwrap()
            }
            "w" => {
                single(&mut self.w)?;
                self.w.as_mut().unwrap()
            }
            "Q" => {
                self.q.push(fresh());
                self.q.last_mut().unwrap()
            }
            "R" => {
                self.r.push(fresh());
                self.r.last_mut().unwrap()
            }
            _ => unreachable!(),
        })
    }
}

fn allowed(section: Section, key: &str) -> bool {
    matches!(
        (section, key),
        (Section::System, "A" | "B")
            | (Section::Cost, "Q" | "R" | "P")
            | (Section::Constraints, "G" | "S_u" | "w")
    )
}

/// Parses a problem file into a validated [`MpcProblem`].
pub fn parse_problem(text: &str) -> Result<MpcProblem> {
    let mut raw = Raw::default();
    let mut section = Section::None;
    // key currently accepting continuation rows
    let mut open: Option<String> = None;
    let mut last_line = 0;

    for (idx, full) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let body = full.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| parse_err(line, "unterminated section header"))?
                .trim();
            section = match name {
                "system" => Section::System,
                "cost" => Section::Cost,
                "constraints" => Section::Constraints,
                "horizon" => {
                    raw.saw_horizon = true;
                    Section::Horizon
                }
                other => return Err(parse_err(line, format!("unknown section [{other}]"))),
            };
            open = None;
            continue;
        }
        if section == Section::None {
            return Err(parse_err(line, "content before the first section"));
        }

        if let Some((key, value)) = body.split_once('=') {
            let key = key.trim();
            let value = value.trim();
            open = None;
            match (section, key) {
                (Section::Cost, "convention") => {
                    raw.convention = Some(value.parse().map_err(|_| {
                        parse_err(line, format!("unknown convention `{value}`"))
                    })?);
                }
                (Section::Horizon, "N") => {
                    let n = value
                        .parse::<usize>()
                        .map_err(|_| parse_err(line, format!("bad horizon `{value}`")))?;
                    raw.horizon = Some((n, line));
                }
                (s, k) if allowed(s, k) => {
                    raw.slot(k, line)?.push_rows(value, line)?;
                    open = Some(k.to_string());
                }
                _ => return Err(parse_err(line, format!("unexpected key `{key}` here"))),
            }
            continue;
        }

        if section == Section::Constraints {
            if let Some(rest) = body.strip_prefix("input_bounds") {
                let v = parse_row(rest, line)?;
                if v.len() != 2 {
                    return Err(parse_err(line, "input_bounds needs `lo hi`"));
                }
                raw.bounds = Some((v[0], v[1], line));
                open = None;
                continue;
            }
        }
        if section == Section::Horizon && raw.horizon.is_none() {
            if let Ok(n) = body.parse::<usize>() {
                raw.horizon = Some((n, line));
                continue;
            }
        }
        match &open {
            Some(key) => {
                let key = key.clone();
                let target = match key.as_str() {
                    "A" => raw.a.as_mut(),
                    "B" => raw.b.as_mut(),
                    "P" => raw.p.as_mut(),
                    "G" => raw.g.as_mut(),
                    "S_u" => raw.s_u.as_mut(),
                    "w" => raw.w.as_mut(),
                    "Q" => raw.q.last_mut(),
                    "R" => raw.r.last_mut(),
                    _ => None,
                };
                target.expect("open key has a slot").push_rows(body, line)?;
            }
            None => return Err(parse_err(line, format!("cannot interpret `{body}`"))),
        }
    }

    let eof = last_line + 1;
    if !raw.saw_horizon {
        return Err(parse_err(eof, "missing [horizon] section"));
    }
    let (horizon, _) = raw.horizon.ok_or_else(|| parse_err(eof, "[horizon] has no N"))?;
    let need = |m: &Option<RawMatrix>, name: &str| -> Result<Matrix> {
        m.as_ref().ok_or_else(|| parse_err(eof, format!("missing `{name}`")))?.build(name)
    };
    let a = need(&raw.a, "A")?;
    let b = need(&raw.b, "B")?;
    let p = need(&raw.p, "P")?;
    if raw.q.is_empty() {
        return Err(parse_err(eof, "missing `Q`"));
    }
    if raw.r.is_empty() {
        return Err(parse_err(eof, "missing `R`"));
    }
    let q = raw.q.iter().map(|m| m.build("Q")).collect::<Result<Vec<_>>>()?;
    let r = raw.r.iter().map(|m| m.build("R")).collect::<Result<Vec<_>>>()?;
    let sys = LtiSystem::new(a, b)?;
    let n = sys.state_dim();
    let nm = horizon * sys.input_dim();

    let constraints = match (raw.bounds, &raw.g) {
        (Some((_, _, line)), Some(_)) => {
            return Err(parse_err(line, "give either input_bounds or G, not both"))
        }
        (Some((lo, hi, line)), None) => {
            if sys.input_dim() != 1 {
                return Err(parse_err(line, "input_bounds needs a single input"));
            }
            InputConstraints::input_bounds(lo, hi, n, horizon)
                .map_err(|e| parse_err(line, e.to_string()))?
        }
        (None, Some(g_raw)) => {
            let g = g_raw.build("G")?;
            let w = raw
                .w
                .as_ref()
                .ok_or_else(|| parse_err(g_raw.line, "`G` given without `w`"))?
                .flat();
            let s_u = match &raw.s_u {
                Some(s) => s.build("S_u")?,
                None => Matrix::zeros(g.rows(), n),
            };
            InputConstraints { g, s_u, w }
        }
        (None, None) => {
            if let Some(w) = raw.w.as_ref().or(raw.s_u.as_ref()) {
                return Err(parse_err(w.line, "`w`/`S_u` given without `G`"));
            }
            InputConstraints::none(n, nm)
        }
    };

    MpcProblem::new(sys, horizon, q, r, p, constraints, raw.convention.unwrap_or_default())
}

pub fn read_problem(path: &std::path::Path) -> Result<MpcProblem> {
    parse_problem(&std::fs::read_to_string(path)?)
}

/// Writes a problem back out in the file format.
pub fn write_problem(p: &MpcProblem) -> String {
    let mut s = String::new();
    let mat = |s: &mut String, key: &str, m: &Matrix| {
        let rows: Vec<String> = (0..m.rows()).map(|i| join_row(m.row(i), " ")).collect();
        let _ = writeln!(s, "{key} = {}", rows.join(" ; "));
    };
    s.push_str("[system]\n");
    mat(&mut s, "A", p.sys().a());
    mat(&mut s, "B", p.sys().b());
    s.push_str("\n[cost]\n");
    for q in p.state_weights() {
        mat(&mut s, "Q", q);
    }
    for r in p.input_weights() {
        mat(&mut s, "R", r);
    }
    mat(&mut s, "P", p.terminal_weight());
    let _ = writeln!(s, "convention = {}", p.convention());
    let c = p.constraints();
    if c.count() > 0 {
        s.push_str("\n[constraints]\n");
        mat(&mut s, "G", &c.g);
        mat(&mut s, "S_u", &c.s_u);
        let _ = writeln!(s, "w = {}", join_row(&c.w, " "));
    }
    let _ = write!(s, "\n[horizon]\nN = {}\n", p.horizon());
    s
}

fn join_row(v: &[f64], sep: &str) -> String {
    v.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(sep)
}

fn push_block(s: &mut String, name: &str, m: &Matrix) {
    let _ = writeln!(s, "{name} {} {}", m.rows(), m.cols());
    for i in 0..m.rows() {
        s.push_str(&join_row(m.row(i), " "));
        s.push('\n');
    }
}

fn push_vec_block(s: &mut String, name: &str, v: &[f64]) {
    push_block(s, name, &Matrix::column(v));
}

fn dims_line(n: usize, m: usize, horizon: usize, n_c: usize) -> String {
    format!("dims n={n} m={m} N={horizon} n_c={n_c}\n")
}

pub fn write_condensed(qp: &CondensedQp) -> String {
    let mut s = String::from("# mpcnet condensed-qp v1\n");
    s.push_str(&dims_line(qp.n, qp.m, qp.horizon, qp.n_constraints()));
    push_block(&mut s, "H", &qp.h);
    push_block(&mut s, "F", &qp.f);
    push_block(&mut s, "S", &qp.s);
    push_block(&mut s, "G", &qp.g);
    push_block(&mut s, "S_u", &qp.s_u);
    push_vec_block(&mut s, "w", &qp.w);
    s
}

pub fn write_implicit(net: &ImplicitNet) -> String {
    let mut s = String::from("# mpcnet implicit-network v1\n");
    s.push_str(&dims_line(net.n, net.m, net.horizon, net.n_c));
    push_block(&mut s, "W", &net.w);
    push_block(&mut s, "Y", &net.y);
    push_vec_block(&mut s, "b", &net.b);
    push_block(&mut s, "W_f", &net.w_f);
    push_block(&mut s, "Y_f", &net.y_f);
    push_vec_block(&mut s, "b_f", &net.b_f);
    s
}

pub fn write_explicit(net: &ExplicitNet) -> String {
    let mut s = String::from("# mpcnet explicit-network v1\n");
    s.push_str(&dims_line(net.n, net.m, net.horizon, net.n_c));
    let _ = writeln!(s, "depth J={}", net.depth);
    push_block(&mut s, "K", &net.skip);
    push_block(&mut s, "W_layer", &net.act);
    push_block(&mut s, "Y_layer", &net.input);
    push_vec_block(&mut s, "b_layer", &net.bias);
    push_block(&mut s, "W_f", &net.w_f);
    push_block(&mut s, "Y_f", &net.y_f);
    push_vec_block(&mut s, "b_f", &net.b_f);
    push_vec_block(&mut s, "w0", &net.w0);
    s
}

/// Parsed export file: header comment, `key=value` metadata and blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportDoc {
    pub kind: String,
    pub meta: Vec<(String, usize)>,
    pub blocks: Vec<(String, Matrix)>,
}

impl ExportDoc {
    pub fn block(&self, name: &str) -> Option<&Matrix> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn meta(&self, key: &str) -> Option<usize> {
        self.meta.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }
}

pub fn parse_export(text: &str) -> Result<ExportDoc> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let kind = match lines.next() {
        Some((_, l)) if l.starts_with("# mpcnet ") => l["# mpcnet ".len()..].trim().to_string(),
        _ => return Err(parse_err(1, "missing `# mpcnet` header")),
    };
    let mut meta = Vec::new();
    let mut blocks = Vec::new();
    while let Some((line, l)) = lines.next() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks[1..].iter().all(|t| t.contains('=')) && toks.len() > 1 {
            for t in &toks[1..] {
                let (k, v) = t.split_once('=').unwrap();
                let v = v.parse().map_err(|_| parse_err(line, format!("bad value in `{t}`")))?;
                meta.push((k.to_string(), v));
            }
            continue;
        }
        if toks.len() != 3 {
            return Err(parse_err(line, "expected `NAME rows cols`"));
        }
        let rows: usize = toks[1].parse().map_err(|_| parse_err(line, "bad row count"))?;
        let cols: usize = toks[2].parse().map_err(|_| parse_err(line, "bad column count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (rl, row) = lines.next().ok_or_else(|| parse_err(line, "block ends early"))?;
            let v = parse_row(row, rl)?;
            if v.len() != cols {
                return Err(parse_err(rl, format!("expected {cols} entries")));
            }
            data.extend(v);
        }
        blocks.push((toks[0].to_string(), Matrix::new(rows, cols, data)?));
    }
    Ok(ExportDoc { kind, meta, blocks })
}

/// Plain matrix file: one row per line, or rows separated by `;`.
pub fn parse_matrix(text: &str) -> Result<Matrix> {
    let mut m = RawMatrix { line: 1, rows: Vec::new() };
    for (i, l) in text.lines().enumerate() {
        let body = l.split('#').next().unwrap_or("");
        m.push_rows(body, i + 1)?;
    }
    m.build("matrix")
}

fn numbered(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}{i}"))
}

pub fn trace_csv(trace: &SimulationTrace) -> String {
    let n = trace.config.x0.len();
    let m = trace.input_dim;
    let mut header = vec!["k".to_string()];
    header.extend(numbered("x", n));
    header.extend(numbered("u", m));
    header.push("iterations".into());
    header.push("residual".into());
    let mut s = header.join(",");
    s.push('\n');
    for st in &trace.steps {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            st.k,
            join_row(&st.x, ","),
            join_row(&st.u, ","),
            st.iterations,
            fmt_f64(st.residual)
        );
    }
    s
}

pub fn surface_csv(points: &[SurfacePoint], m: usize) -> String {
    let n = points.first().map_or(2, |p| p.x.len());
    let mut header: Vec<String> = numbered("x", n).collect();
    if m == 1 {
        header.push("u".into());
    } else {
        header.extend(numbered("u", m));
    }
    let mut s = header.join(",");
    s.push('\n');
    for p in points {
        s.push_str(&join_row(&p.x, ","));
        s.push(',');
        match &p.u {
            Some(u) => s.push_str(&join_row(u, ",")),
            None => s.push_str(&vec![""; m].join(",")),
        }
        s.push('\n');
    }
    s
}

/// One row per layer, one residual column per gain.
pub fn unravel_csv(gains: &[f64], traces: &[UnravelTrace]) -> String {
    let mut s = String::from("layer");
    for g in gains {
        let _ = write!(s, ",K={}", fmt_f64(*g));
    }
    s.push('\n');
    let rows = traces.iter().map(|t| t.residuals.len()).max().unwrap_or(0);
    for j in 0..rows {
        let _ = write!(s, "{j}");
        for t in traces {
            s.push(',');
            if let Some(r) = t.residuals.get(j) {
                s.push_str(&fmt_f64(*r));
            }
        }
        s.push('\n');
    }
    s
}

pub const REGIONS_HEADER: &str = "region_id,active_set,saturated,E_row_major,omega,witness_count";

/// Region report; list-valued fields are `;`-separated.
pub fn regions_csv(regions: &[PwaRegion]) -> String {
    let mut s = format!("{REGIONS_HEADER}\n");
    for (id, r) in regions.iter().enumerate() {
        let sigma: Vec<String> = r.active_set.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(
            s,
            "{id},{},{},{},{},{}",
            sigma.join(";"),
            r.saturated,
            join_row(r.e.as_slice(), ";"),
            join_row(&r.omega, ";"),
            r.witness_count
        );
    }
    s
}

pub fn parse_regions_csv(text: &str, n: usize, m: usize) -> Result<Vec<PwaRegion>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == REGIONS_HEADER => {}
        _ => return Err(parse_err(1, format!("expected header `{REGIONS_HEADER}`"))),
    }
    let list = |field: &str, line: usize| -> Result<Vec<f64>> {
        if field.is_empty() {
            return Ok(Vec::new());
        }
        field
            .split(';')
            .map(|t| parse_number(t.trim()).ok_or_else(|| parse_err(line, format!("bad number `{t}`"))))
            .collect()
    };
    let mut out = Vec::new();
    for (i, l) in lines {
        let line = i + 1;
        if l.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 6 {
            return Err(parse_err(line, "expected 6 fields"));
        }
        let active_set = if f[1].is_empty() {
            Vec::new()
        } else {
            f[1].split(';')
                .map(|t| t.trim().parse().map_err(|_| parse_err(line, format!("bad index `{t}`"))))
                .collect::<Result<Vec<usize>>>()?
        };
        let e = list(f[3], line)?;
        if e.len() != m * n {
            return Err(parse_err(line, format!("E needs {} entries", m * n)));
        }
        let omega = list(f[4], line)?;
        if omega.len() != m {
            return Err(parse_err(line, format!("omega needs {m} entries")));
        }
        let mut region = PwaRegion::from_law(active_set, Matrix::new(m, n, e)?, omega);
        region.saturated = match f[2].trim() {
            "true" => true,
            "false" => false,
            other => return Err(parse_err(line, format!("bad flag `{other}`"))),
        };
        region.witness_count = f[5]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, "bad witness count"))?;
        out.push(region);
    }
    Ok(out)
}

pub fn verdicts_csv(verdicts: &[RegionVerdict]) -> String {
    let mut s = String::from("region_id,max_eig,holds\n");
    for v in verdicts {
        let _ = writeln!(s, "{},{},{}", v.region_id, fmt_f64(v.max_eig), v.holds);
    }
    s
}
