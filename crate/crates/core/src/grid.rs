//! Radial feeder topology and the LinDistFlow sensitivity matrices.
//!
//! Voltages are linearized around 1 p.u.:
//!
//! ```text
//! v = R·p + X·q + 1
//! ```
//!
//! where `R_ij` (resp. `X_ij`) is the sum of line resistances (reactances) on
//! the common part of the substation-to-bus paths of buses `i` and `j`,
//! multiplied by a convention factor (1.0 for voltage magnitudes, 2.0 for
//! squared voltage magnitudes).

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::linalg;

/// Bundled IEEE 33-bus feeder in the line-list format.
pub const IEEE33_FEEDER: &str = include_str!("../data/ieee33.feeder");

/// Minimum eigenvalue accepted for R and X after symmetrization.
pub const PD_TOLERANCE: f64 = 1e-10;

/// One branch, impedances in p.u. on the feeder bases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederTopology {
    /// Load buses, substation excluded. Buses are labelled `1..=bus_count`, the
    /// substation is bus 0.
    pub bus_count: usize,
    pub lines: Vec<Line>,
    pub base_power_kva: f64,
    pub base_voltage_kv: f64,
}

impl FeederTopology {
    pub fn new(
        bus_count: usize,
        lines: Vec<Line>,
        base_power_kva: f64,
        base_voltage_kv: f64,
    ) -> Result<Self> {
        let topo = FeederTopology {
            bus_count,
            lines,
            base_power_kva,
            base_voltage_kv,
        };
        topo.validate()?;
        Ok(topo)
    }

    /// Base impedance in ohms: `kV² · 1000 / kVA`.
    pub fn base_impedance_ohm(&self) -> f64 {
        self.base_voltage_kv * self.base_voltage_kv * 1000.0 / self.base_power_kva
    }

    /// Checks that the lines form a tree rooted at the substation with
    /// strictly positive impedances.
    pub fn validate(&self) -> Result<()> {
        let n = self.bus_count;
        if n == 0 {
            return Err(Error::Topology("feeder has no load buses".into()));
        }
        if self.lines.len() != n {
            return Err(Error::Topology(format!(
                "a radial feeder with {n} load buses needs exactly {n} lines, found {}",
                self.lines.len()
            )));
        }
        for (idx, line) in self.lines.iter().enumerate() {
            if line.from > n || line.to > n {
                return Err(Error::Topology(format!(
                    "line {idx} references bus outside 0..={n}: {} -> {}",
                    line.from, line.to
                )));
            }
            if line.from == line.to {
                return Err(Error::Topology(format!("line {idx} is a self-loop")));
            }
            if !(line.r > 0.0 && line.r.is_finite()) || !(line.x > 0.0 && line.x.is_finite()) {
                return Err(Error::Topology(format!(
                    "line {idx} ({} -> {}) must have r > 0 and x > 0, got r={}, x={}",
                    line.from, line.to, line.r, line.x
                )));
            }
        }
        self.parents().map(|_| ())
    }

    /// Parent bus and parent line of every bus after rooting the tree at bus 0.
    /// Index 0 holds `None`.
    fn parents(&self) -> Result<Vec<Option<(usize, usize)>>> {
        let n = self.bus_count;
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + 1];
        for (idx, line) in self.lines.iter().enumerate() {
            adj[line.from].push((line.to, idx));
            adj[line.to].push((line.from, idx));
        }
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n + 1];
        let mut seen = vec![false; n + 1];
        seen[0] = true;
        let mut queue = VecDeque::from([0usize]);
        while let Some(bus) = queue.pop_front() {
            for &(next, idx) in &adj[bus] {
                if parent[bus].is_some_and(|(_, via)| via == idx) {
                    continue;
                }
                if seen[next] {
                    return Err(Error::Topology(format!(
                        "cycle detected through line {idx} ({} -> {})",
                        self.lines[idx].from, self.lines[idx].to
                    )));
                }
                seen[next] = true;
                parent[next] = Some((bus, idx));
                queue.push_back(next);
            }
        }
        if let Some(bus) = seen.iter().position(|s| !s) {
            return Err(Error::Topology(format!(
                "bus {bus} is not reachable from the substation"
            )));
        }
        Ok(parent)
    }
}

/// Immutable network model: topology plus dense sensitivity matrices.
#[derive(Debug, Clone)]
pub struct FeederModel {
    topology: Option<FeederTopology>,
    scale_factor: f64,
    r: DMatrix<f64>,
    x: DMatrix<f64>,
    x_inv: DMatrix<f64>,
    d_e: DMatrix<f64>,
    d_o: DMatrix<f64>,
}

impl FeederModel {
    /// Builds a model directly from sensitivity matrices (no topology).
    pub fn from_matrices(r: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        Self::assemble(None, 1.0, r, x)
    }

    fn assemble(
        topology: Option<FeederTopology>,
        scale_factor: f64,
        r: DMatrix<f64>,
        x: DMatrix<f64>,
    ) -> Result<Self> {
        let n = r.nrows();
        if !r.is_square() || !x.is_square() || x.nrows() != n || n == 0 {
            return Err(Error::dim(format!(
                "R is {}x{}, X is {}x{}; expected two non-empty n x n matrices",
                r.nrows(),
                r.ncols(),
                x.nrows(),
                x.ncols()
            )));
        }
        let r = linalg::symmetrize(&r);
        let x = linalg::symmetrize(&x);
        for (name, m) in [("R", &r), ("X", &x)] {
            let (min, _) = linalg::sym_extremes(m)?;
            if !(min > PD_TOLERANCE) {
                return Err(Error::Model(format!(
                    "{name} is not positive definite (λ_min = {min:e})"
                )));
            }
        }
        let chol = x
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Model("Cholesky factorization of X failed".into()))?;
        let x_inv = linalg::symmetrize(&chol.inverse());
        let xr = chol.solve(&r);
        let d_e = DMatrix::from_diagonal(&xr.diagonal());
        let d_o = &xr - &d_e;
        Ok(FeederModel {
            topology,
            scale_factor,
            r,
            x,
            x_inv,
            d_e,
            d_o,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn topology(&self) -> Option<&FeederTopology> {
        self.topology.as_ref()
    }

    pub fn scale_factor(&self) -> f64 {
        self.scale_factor
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn x_inv(&self) -> &DMatrix<f64> {
        &self.x_inv
    }

    /// Diagonal part of `X⁻¹R`.
    pub fn d_e(&self) -> &DMatrix<f64> {
        &self.d_e
    }

    /// Off-diagonal part of `X⁻¹R`.
    pub fn d_o(&self) -> &DMatrix<f64> {
        &self.d_o
    }
}

/// Builds R and X by common-path impedance sums and validates them.
pub fn build_feeder(topology: FeederTopology, scale_factor: f64) -> Result<FeederModel> {
    if !(scale_factor > 0.0 && scale_factor.is_finite()) {
        return Err(Error::Config(format!(
            "scale factor must be positive, got {scale_factor}"
        )));
    }
    topology.validate()?;
    let n = topology.bus_count;
    let parent = topology.parents()?;

    // Cumulative impedance from the substation, in BFS order so parents come first.
    let mut cum_r = vec![0.0; n + 1];
    let mut cum_x = vec![0.0; n + 1];
    let mut depth = vec![0usize; n + 1];
    let mut order: Vec<usize> = (1..=n).collect();
    let mut resolved = vec![false; n + 1];
    resolved[0] = true;
    while !order.is_empty() {
        order.retain(|&bus| {
            let (p, idx) = parent[bus].expect("validated tree");
            if !resolved[p] {
                return true;
            }
            cum_r[bus] = cum_r[p] + topology.lines[idx].r;
            cum_x[bus] = cum_x[p] + topology.lines[idx].x;
            depth[bus] = depth[p] + 1;
            resolved[bus] = true;
            false
        });
    }

    let lca = |mut a: usize, mut b: usize| {
        while depth[a] > depth[b] {
            a = parent[a].expect("non-root").0;
        }
        while depth[b] > depth[a] {
            b = parent[b].expect("non-root").0;
        }
        while a != b {
            a = parent[a].expect("non-root").0;
            b = parent[b].expect("non-root").0;
        }
        a
    };

    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    for i in 1..=n {
        for j in i..=n {
            let common = lca(i, j);
            let (rv, xv) = (scale_factor * cum_r[common], scale_factor * cum_x[common]);
            r[(i - 1, j - 1)] = rv;
            r[(j - 1, i - 1)] = rv;
            x[(i - 1, j - 1)] = xv;
            x[(j - 1, i - 1)] = xv;
        }
    }
    FeederModel::assemble(Some(topology), scale_factor, r, x)
}

/// `v = R·p + X·q + 1`.
pub fn voltage_from_injections(
    model: &FeederModel,
    p: &DVector<f64>,
    q: &DVector<f64>,
) -> Result<DVector<f64>> {
    ensure_len("active injections p", p.len(), model.n())?;
    ensure_len("reactive injections q", q.len(), model.n())?;
    Ok(model.r() * p + model.x() * q + DVector::from_element(model.n(), 1.0))
}

/// Parses the line-list feeder format:
///
/// ```text
/// # comment
/// buses=<n> base_kva=<v> base_kv=<v>
/// <from_bus> <to_bus> <r_ohm> <x_ohm>
/// ```
///
/// Ohmic impedances are converted to p.u. on the declared bases.
pub fn parse_feeder(text: &str) -> Result<FeederTopology> {
    let mut header: Option<(usize, f64, f64)> = None;
    let mut raw: Vec<(usize, usize, f64, f64)> = Vec::new();
    let mut last_line = 0;

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        last_line = lineno;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if header.is_none() {
            header = Some(parse_header(line, lineno)?);
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::format(
                lineno,
                format!("expected `from to r_ohm x_ohm`, found {} fields", fields.len()),
            ));
        }
        let bus = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(lineno, format!("invalid bus index `{s}`")))
        };
        let ohm = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format(lineno, format!("invalid impedance `{s}`")))
        };
        raw.push((bus(fields[0])?, bus(fields[1])?, ohm(fields[2])?, ohm(fields[3])?));
    }

    let (bus_count, base_kva, base_kv) =
        header.ok_or_else(|| Error::format(last_line.max(1), "missing `buses=` header"))?;
    let z_base = base_kv * base_kv * 1000.0 / base_kva;
    let lines = raw
        .into_iter()
        .map(|(from, to, r, x)| Line {
            from,
            to,
            r: r / z_base,
            x: x / z_base,
        })
        .collect();
    FeederTopology::new(bus_count, lines, base_kva, base_kv)
}

fn parse_header(line: &str, lineno: usize) -> Result<(usize, f64, f64)> {
    let mut buses = None;
    let mut kva = None;
    let mut kv = None;
    for tok in line.split_whitespace() {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| Error::format(lineno, format!("expected key=value, found `{tok}`")))?;
        let bad = || Error::format(lineno, format!("invalid value for `{key}`: `{value}`"));
        match key {
            "buses" => buses = Some(value.parse::<usize>().map_err(|_| bad())?),
            "base_kva" => kva = Some(value.parse::<f64>().map_err(|_| bad())?),
            "base_kv" => kv = Some(value.parse::<f64>().map_err(|_| bad())?),
            _ => return Err(Error::format(lineno, format!("unknown header key `{key}`"))),
        }
    }
    match (buses, kva, kv) {
        (Some(b), Some(p), Some(v)) if p > 0.0 && v > 0.0 => Ok((b, p, v)),
        (Some(_), Some(_), Some(_)) => Err(Error::format(lineno, "bases must be positive")),
        _ => Err(Error::format(
            lineno,
            "header needs `buses=<n> base_kva=<v> base_kv=<v>`",
        )),
    }
}

pub fn load_feeder_file(path: impl AsRef<Path>) -> Result<FeederTopology> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feeder(&text)
}

/// The bundled IEEE 33-bus feeder (32 load buses).
pub fn ieee33() -> FeederTopology {
    parse_feeder(IEEE33_FEEDER).expect("bundled feeder is valid")
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    fn two_bus() -> FeederTopology {
        FeederTopology::new(
            2,
            vec![
                Line { from: 0, to: 1, r: 0.1, x: 0.2 },
                Line { from: 1, to: 2, r: 0.1, x: 0.1 },
            ],
            100.0,
            12.66,
        )
        .unwrap()
    }

    /// Lines on the path from the substation to `bus`, by brute-force walking
    /// the line list.
    fn path_lines(topo: &FeederTopology, bus: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut cur = bus;
        while cur != 0 {
            let (idx, line) = topo
                .lines
                .iter()
                .enumerate()
                .find(|(idx, l)| {
                    (l.to == cur || l.from == cur) && !out.contains(idx) && {
                        let other = if l.to == cur { l.from } else { l.to };
                        depth_of(topo, other) + 1 == depth_of(topo, cur)
                    }
                })
                .unwrap();
            out.insert(idx);
            cur = if line.to == cur { line.from } else { line.to };
        }
        out
    }

    fn depth_of(topo: &FeederTopology, bus: usize) -> usize {
        // Breadth-first distance from the substation.
        let mut dist = vec![usize::MAX; topo.bus_count + 1];
        dist[0] = 0;
        let mut changed = true;
        while changed {
            changed = false;
            for l in &topo.lines {
                for (a, b) in [(l.from, l.to), (l.to, l.from)] {
                    if dist[a] != usize::MAX && dist[b] == usize::MAX {
                        dist[b] = dist[a] + 1;
                        changed = true;
                    }
                }
            }
        }
        dist[bus]
    }

    fn brute_force(topo: &FeederTopology) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = topo.bus_count;
        let paths: Vec<_> = (1..=n).map(|b| path_lines(topo, b)).collect();
        let mut r = DMatrix::zeros(n, n);
        let mut x = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                for idx in paths[i].intersection(&paths[j]) {
                    r[(i, j)] += topo.lines[*idx].r;
                    x[(i, j)] += topo.lines[*idx].x;
                }
            }
        }
        (r, x)
    }

    #[test]
    fn two_bus_chain_matches_path_enumeration() {
        let topo = two_bus();
        let (r_bf, x_bf) = brute_force(&topo);
        let x_hand = DMatrix::from_row_slice(2, 2, &[0.2, 0.2, 0.2, 0.3]);
        let r_hand = DMatrix::from_row_slice(2, 2, &[0.1, 0.1, 0.1, 0.2]);
        assert!(linalg::max_abs_diff(&x_bf, &x_hand) < 1e-15);
        assert!(linalg::max_abs_diff(&r_bf, &r_hand) < 1e-15);

        let model = build_feeder(topo, 1.0).unwrap();
        assert!(linalg::max_abs_diff(model.x(), &x_bf) < 1e-15);
        assert!(linalg::max_abs_diff(model.r(), &r_bf) < 1e-15);
    }

    #[test]
    fn scale_factor_multiplies_matrices() {
        let m1 = build_feeder(two_bus(), 1.0).unwrap();
        let m2 = build_feeder(two_bus(), 2.0).unwrap();
        assert!(linalg::max_abs_diff(&(m1.x() * 2.0), m2.x()) < 1e-15);
        assert!(linalg::max_abs_diff(&(m1.r() * 2.0), m2.r()) < 1e-15);
        // X⁻¹R is invariant to the common factor.
        assert!(linalg::max_abs_diff(m1.d_o(), m2.d_o()) < 1e-12);
    }

    #[test]
    fn zero_resistance_rejected() {
        let err = FeederTopology::new(1, vec![Line { from: 0, to: 1, r: 0.0, x: 1.0 }], 100.0, 12.66)
            .unwrap_err();
        assert!(matches!(err, Error::Topology(_)));
    }

    #[test]
    fn ieee33_matches_brute_force_and_is_pd() {
        let topo = ieee33();
        assert_eq!(topo.bus_count, 32);
        assert_eq!(topo.lines.len(), 32);
        let (r_bf, x_bf) = brute_force(&topo);
        let model = build_feeder(topo, 1.0).unwrap();
        assert!(linalg::max_abs_diff(model.x(), &x_bf) < 1e-15);
        assert!(linalg::max_abs_diff(model.r(), &r_bf) < 1e-15);
        assert!(linalg::max_abs_diff(model.x(), &model.x().transpose()) < 1e-12);
        let (xmin, _) = linalg::sym_extremes(model.x()).unwrap();
        let (rmin, _) = linalg::sym_extremes(model.r()).unwrap();
        assert!(xmin > 0.0 && rmin > 0.0);
    }

    #[test]
    fn split_of_x_inv_r() {
        let model = build_feeder(ieee33(), 1.0).unwrap();
        let xr = model.x_inv() * model.r();
        let sum = model.d_e() + model.d_o();
        let scale = xr.amax();
        assert!(linalg::max_abs_diff(&sum, &xr) <= 1e-12 * scale.max(1.0));
        for i in 0..model.n() {
            assert_eq!(model.d_o()[(i, i)], 0.0);
            for j in 0..model.n() {
                if i != j {
                    assert_eq!(model.d_e()[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn voltage_examples() {
        let model = build_feeder(two_bus(), 1.0).unwrap();
        let zero = DVector::zeros(2);
        assert_eq!(
            voltage_from_injections(&model, &zero, &zero).unwrap(),
            DVector::from_element(2, 1.0)
        );
        let v = voltage_from_injections(&model, &DVector::from_vec(vec![1.0, 0.0]), &zero).unwrap();
        assert!((v[0] - 1.1).abs() < 1e-15 && (v[1] - 1.1).abs() < 1e-15);

        let same = FeederModel::from_matrices(model.x().clone(), model.x().clone()).unwrap();
        let p = DVector::from_vec(vec![0.4, -1.3]);
        let v = voltage_from_injections(&same, &p, &(-&p)).unwrap();
        assert!((v - DVector::from_element(2, 1.0)).amax() < 1e-15);

        assert!(matches!(
            voltage_from_injections(&model, &DVector::zeros(3), &zero),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn parse_rejects_cycle_and_empty() {
        let text = "buses=2 base_kva=100 base_kv=12.66\n0 1 1 1\n1 2 1 1\n2 1 1 1\n";
        assert!(matches!(parse_feeder(text), Err(Error::Topology(_))));
        let text = "buses=2 base_kva=100 base_kv=12.66\n0 1 1 1\n1 2 1 1\n0 2 1 1\n";
        assert!(matches!(parse_feeder(text), Err(Error::Topology(_))));
        assert!(matches!(parse_feeder(""), Err(Error::Format { .. })));
        assert!(matches!(
            parse_feeder("buses=1 base_kva=100 base_kv=12.66\n0 1 abc 1\n"),
            Err(Error::Format { line: 2, .. })
        ));
    }

    #[test]
    fn parse_converts_ohms_to_per_unit() {
        let topo = parse_feeder("# c\nbuses=1 base_kva=100 base_kv=10\n0 1 1000 2000\n").unwrap();
        // z_base = 10² · 1000 / 100 = 1000 Ω
        assert_eq!(topo.lines[0].r, 1.0);
        assert_eq!(topo.lines[0].x, 2.0);
    }

    #[test]
    fn unreachable_bus_rejected() {
        let err = FeederTopology::new(
            3,
            vec![
                Line { from: 0, to: 1, r: 1.0, x: 1.0 },
                Line { from: 2, to: 3, r: 1.0, x: 1.0 },
                Line { from: 3, to: 2, r: 1.0, x: 1.0 },
            ],
            100.0,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Topology(_)));
    }
}
