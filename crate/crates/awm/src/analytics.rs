//! Mapping-weight trace analysis: extract per-image λ₁ vectors, reduce
//! them with PCA then LDA, classify by nearest class mean, and summarize
//! with cumulative match (rank-k) curves.
//!
//! All eigenproblems go through one cyclic Jacobi solver; the matrices
//! here are at most a few hundred square, where Jacobi is plenty and
//! fully deterministic.

use crate::data::{make_batch, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// small dense linear algebra
// ---------------------------------------------------------------------------

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let (k2, m) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for l in 0..k {
            let av = a.at2(i, l);
            if av == 0.0 {
                continue;
            }
            for j in 0..m {
                let cur = out.at2(i, j);
                out.set2(i, j, cur + av * b.at2(l, j));
            }
        }
    }
    out
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (n, m) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..n {
        for j in 0..m {
            out.set2(j, i, a.at2(i, j));
        }
    }
    out
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with eigenvectors as the
/// matching columns.
pub fn jacobi_eigh(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (n, m) = a.dims2("jacobi_eigh")?;
    if n != m {
        return Err(Error::shape("jacobi_eigh", &[n, n], a.shape()));
    }
    let sym_err = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (a.at2(i, j) - a.at2(j, i)).abs())
        .fold(0.0f64, f64::max);
    let scale = a.data().iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1.0);
    if sym_err > 1e-9 * scale {
        return Err(Error::Numerical(format!("jacobi_eigh input is not symmetric (err {sym_err:.3e})")));
    }

    let mut w = a.clone();
    let mut v = Tensor::zeros(&[n, n]);
    for i in 0..n {
        v.set2(i, i, 1.0);
    }
    let off = |w: &Tensor| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += w.at2(i, j) * w.at2(i, j);
            }
        }
        s.sqrt()
    };
    let norm = a.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let tol = 1e-14 * norm;
    for _sweep in 0..100 {
        if off(&w) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w.at2(p, q);
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let theta = (w.at2(q, q) - w.at2(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let wkp = w.at2(k, p);
                    let wkq = w.at2(k, q);
                    w.set2(k, p, c * wkp - s * wkq);
                    w.set2(k, q, s * wkp + c * wkq);
                }
                for k in 0..n {
                    let wpk = w.at2(p, k);
                    let wqk = w.at2(q, k);
                    w.set2(p, k, c * wpk - s * wqk);
                    w.set2(q, k, s * wpk + c * wqk);
                }
                for k in 0..n {
                    let vkp = v.at2(k, p);
                    let vkq = v.at2(k, q);
                    v.set2(k, p, c * vkp - s * vkq);
                    v.set2(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if off(&w) > tol.max(1e-10 * norm) {
        return Err(Error::Numerical("jacobi_eigh did not converge".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let evals: Vec<f64> = (0..n).map(|i| w.at2(i, i)).collect();
    order.sort_by(|&i, &j| evals[j].partial_cmp(&evals[i]).unwrap());
    let mut vals = Vec::with_capacity(n);
    let mut vecs = Tensor::zeros(&[n, n]);
    for (col, &i) in order.iter().enumerate() {
        vals.push(evals[i]);
        for k in 0..n {
            vecs.set2(k, col, v.at2(k, i));
        }
    }
    Ok((vals, vecs))
}

/// Deterministic sign convention: flip each column so its
/// largest-magnitude component is positive.
fn fix_signs(basis: &mut Tensor) {
    let (rows, cols) = (basis.shape()[0], basis.shape()[1]);
    for j in 0..cols {
        let mut best = 0usize;
        for i in 1..rows {
            if basis.at2(i, j).abs() > basis.at2(best, j).abs() {
                best = i;
            }
        }
        if basis.at2(best, j) < 0.0 {
            for i in 0..rows {
                let x = basis.at2(i, j);
                basis.set2(i, j, -x);
            }
        }
    }
}

fn orthonormal_completion(basis: &mut Tensor, from_col: usize) {
    let (rows, cols) = (basis.shape()[0], basis.shape()[1]);
    let mut filled = from_col;
    let mut cand = 0usize;
    while filled < cols && cand < rows {
        let mut col = vec![0.0; rows];
        col[cand] = 1.0;
        cand += 1;
        for j in 0..filled {
            let dot: f64 = (0..rows).map(|i| col[i] * basis.at2(i, j)).sum();
            for (i, c) in col.iter_mut().enumerate() {
                *c -= dot * basis.at2(i, j);
            }
        }
        let nrm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm < 1e-8 {
            continue;
        }
        for (i, c) in col.iter().enumerate() {
            basis.set2(i, filled, c / nrm);
        }
        filled += 1;
    }
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

pub struct PcaModel {
    pub mean: Vec<f64>,
    /// D x p, orthonormal columns ordered by descending variance.
    pub basis: Tensor,
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (d, p) = (self.basis.shape()[0], self.basis.shape()[1]);
        if x.len() != d {
            return Err(Error::shape("pca project", &[d], &[x.len()]));
        }
        let mut y = vec![0.0; p];
        for (i, &xi) in x.iter().enumerate() {
            let c = xi - self.mean[i];
            if c == 0.0 {
                continue;
            }
            for (j, yj) in y.iter_mut().enumerate() {
                *yj += c * self.basis.at2(i, j);
            }
        }
        Ok(y)
    }
}

/// Top-p principal directions of the sample covariance (divisor n-1).
/// Uses the n x n Gram matrix when n < D. If p exceeds the data rank the
/// trailing columns are an arbitrary orthonormal completion with zero
/// eigenvalue.
pub fn fit_pca(x: &Tensor, p: usize) -> Result<PcaModel> {
    let (n, d) = x.dims2("fit_pca")?;
    if p < 1 || n <= p.min(d - 1).max(1) {
        return Err(Error::invalid(format!("fit_pca needs n > p >= 1 (n={n}, p={p})")));
    }
    if p > d {
        return Err(Error::invalid(format!("fit_pca target dim {p} exceeds data dim {d}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += x.at2(i, j);
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut xc = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for j in 0..d {
            xc.set2(i, j, x.at2(i, j) - mean[j]);
        }
    }

    let mut basis = Tensor::zeros(&[d, p]);
    let mut eigenvalues = vec![0.0; p];
    let denom = (n - 1) as f64;
    if d <= n {
        let cov = {
            let mut c = matmul(&transpose(&xc), &xc);
            for v in c.data_mut() {
                *v /= denom;
            }
            c
        };
        let (vals, vecs) = jacobi_eigh(&cov)?;
        for j in 0..p {
            eigenvalues[j] = vals[j].max(0.0);
            for i in 0..d {
                basis.set2(i, j, vecs.at2(i, j));
            }
        }
    } else {
        // Gram trick: eigenvectors of Xc Xc^T map to covariance
        // eigenvectors as Xc^T u / sqrt(sigma)
        let gram = matmul(&xc, &transpose(&xc));
        let (vals, vecs) = jacobi_eigh(&gram)?;
        let scale = vals.first().copied().unwrap_or(0.0).max(1e-300);
        let mut col = 0usize;
        for j in 0..p.min(n) {
            let sigma = vals[j];
            if sigma <= 1e-12 * scale {
                break;
            }
            eigenvalues[col] = sigma / denom;
            let inv = 1.0 / sigma.sqrt();
            for i in 0..d {
                let mut s = 0.0;
                for k in 0..n {
                    s += xc.at2(k, i) * vecs.at2(k, j);
                }
                basis.set2(i, col, s * inv);
            }
            col += 1;
        }
        if col < p {
            eprintln!("fit_pca: requested {p} components but data rank is {col}; padding with zero-variance directions");
            orthonormal_completion(&mut basis, col);
        }
    }
    fix_signs(&mut basis);
    Ok(PcaModel { mean, basis, eigenvalues })
}

// ---------------------------------------------------------------------------
// LDA
// ---------------------------------------------------------------------------

fn class_partition(labels: &[usize]) -> Result<Vec<(usize, Vec<usize>)>> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("lda needs at least 2 classes"));
    }
    let mut part = Vec::with_capacity(classes.len());
    for &c in &classes {
        let idxs: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect();
        if idxs.len() < 2 {
            return Err(Error::invalid(format!("class {c} has fewer than 2 samples")));
        }
        part.push((c, idxs));
    }
    Ok(part)
}

/// Fisher discriminant directions: whiten the (regularized) within-class
/// scatter, eigendecompose the whitened between-class scatter, keep the
/// top d. Returns a p x d basis.
pub fn fit_lda(x: &Tensor, labels: &[usize], d: usize) -> Result<Tensor> {
    let (n, p) = x.dims2("fit_lda")?;
    if labels.len() != n {
        return Err(Error::invalid("label count does not match sample count"));
    }
    let part = class_partition(labels)?;
    if d < 1 || d > part.len() - 1 || d > p {
        return Err(Error::invalid(format!(
            "lda target dim {d} must be in [1, min(classes-1={}, p={p})]",
            part.len() - 1
        )));
    }

    let mut global = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            global[j] += x.at2(i, j);
        }
    }
    for g in global.iter_mut() {
        *g /= n as f64;
    }

    let mut sw = Tensor::zeros(&[p, p]);
    let mut sb = Tensor::zeros(&[p, p]);
    for (_, idxs) in &part {
        let nc = idxs.len() as f64;
        let mut mc = vec![0.0; p];
        for &i in idxs {
            for j in 0..p {
                mc[j] += x.at2(i, j);
            }
        }
        for m in mc.iter_mut() {
            *m /= nc;
        }
        for &i in idxs {
            for a in 0..p {
                let da = x.at2(i, a) - mc[a];
                for b in a..p {
                    let db = x.at2(i, b) - mc[b];
                    let v = sw.at2(a, b) + da * db;
                    sw.set2(a, b, v);
                    if b != a {
                        sw.set2(b, a, v);
                    }
                }
            }
        }
        for a in 0..p {
            let da = mc[a] - global[a];
            for b in a..p {
                let db = mc[b] - global[b];
                let v = sb.at2(a, b) + nc * da * db;
                sb.set2(a, b, v);
                if b != a {
                    sb.set2(b, a, v);
                }
            }
        }
    }

    // regularize S_w so small-sample runs stay invertible
    let trace: f64 = (0..p).map(|i| sw.at2(i, i)).sum();
    let eps = 1e-6 * trace / p as f64;
    for i in 0..p {
        let v = sw.at2(i, i) + eps;
        sw.set2(i, i, v);
    }

    let (wvals, wvecs) = jacobi_eigh(&sw)?;
    if wvals.iter().any(|&v| v <= 0.0) {
        return Err(Error::Numerical("within-class scatter is not positive definite".into()));
    }
    // symmetric inverse square root of S_w
    let mut wis = Tensor::zeros(&[p, p]);
    for a in 0..p {
        for b in 0..p {
            let mut s = 0.0;
            for k in 0..p {
                s += wvecs.at2(a, k) * wvecs.at2(b, k) / wvals[k].sqrt();
            }
            wis.set2(a, b, s);
        }
    }
    let m = matmul(&matmul(&wis, &sb), &wis);
    let (_, mvecs) = jacobi_eigh(&m)?;
    let mut top = Tensor::zeros(&[p, d]);
    for j in 0..d {
        for i in 0..p {
            top.set2(i, j, mvecs.at2(i, j));
        }
    }
    let mut basis = matmul(&wis, &top);
    fix_signs(&mut basis);
    Ok(basis)
}

// ---------------------------------------------------------------------------
// full pipeline and classification
// ---------------------------------------------------------------------------

pub struct LdaModel {
    pub pca: PcaModel,
    /// p x d.
    pub lda_basis: Tensor,
    /// Sorted distinct class ids.
    pub classes: Vec<usize>,
    /// classes.len() x d class means in the final space.
    pub class_means: Tensor,
}

impl LdaModel {
    pub fn final_dim(&self) -> usize {
        self.lda_basis.shape()[1]
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y = self.pca.project(x)?;
        let (p, d) = (self.lda_basis.shape()[0], self.lda_basis.shape()[1]);
        let mut z = vec![0.0; d];
        for (i, &yi) in y.iter().enumerate().take(p) {
            for (j, zj) in z.iter_mut().enumerate() {
                *zj += yi * self.lda_basis.at2(i, j);
            }
        }
        Ok(z)
    }
}

/// Fit PCA (to p dims) then LDA (to d dims) and record per-class mean
/// features in the final space.
pub fn fit_pipeline(x: &Tensor, labels: &[usize], p: usize, d: usize) -> Result<LdaModel> {
    let pca = fit_pca(x, p)?;
    let (n, _) = x.dims2("fit_pipeline")?;
    let mut xp = Tensor::zeros(&[n, p]);
    for i in 0..n {
        let row: Vec<f64> = (0..x.shape()[1]).map(|j| x.at2(i, j)).collect();
        let y = pca.project(&row)?;
        for j in 0..p {
            xp.set2(i, j, y[j]);
        }
    }
    let lda_basis = fit_lda(&xp, labels, d)?;
    let part = class_partition(labels)?;
    let model_wo_means = LdaModel {
        pca,
        lda_basis,
        classes: part.iter().map(|(c, _)| *c).collect(),
        class_means: Tensor::zeros(&[part.len(), d]),
    };
    let mut means = Tensor::zeros(&[part.len(), d]);
    for (ci, (_, idxs)) in part.iter().enumerate() {
        for &i in idxs {
            let row: Vec<f64> = (0..x.shape()[1]).map(|j| x.at2(i, j)).collect();
            let z = model_wo_means.project(&row)?;
            for j in 0..d {
                means.set2(ci, j, means.at2(ci, j) + z[j] / idxs.len() as f64);
            }
        }
    }
    Ok(LdaModel { class_means: means, ..model_wo_means })
}

/// Classes ordered by ascending Euclidean distance between the projected
/// query and each class mean; ties break toward the lower class id.
pub fn classify_class_mean(model: &LdaModel, x: &[f64]) -> Result<Vec<usize>> {
    let z = model.project(x)?;
    let d = model.final_dim();
    let mut scored: Vec<(f64, usize)> = model
        .classes
        .iter()
        .enumerate()
        .map(|(ci, &c)| {
            let dist: f64 = (0..d).map(|j| (z[j] - model.class_means.at2(ci, j)).powi(2)).sum();
            (dist, c)
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, c)| c).collect())
}

/// Rank-k accuracy for k = 1..=classes: fraction of queries whose true
/// class appears in the top k. Monotone, ends at 1 when every label is a
/// known class.
pub fn cmc_curve(model: &LdaModel, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (n, dd) = x.dims2("cmc_curve")?;
    if labels.len() != n {
        return Err(Error::invalid("label count does not match sample count"));
    }
    let k = model.classes.len();
    let mut hits = vec![0usize; k];
    for i in 0..n {
        let row: Vec<f64> = (0..dd).map(|j| x.at2(i, j)).collect();
        let ranking = classify_class_mean(model, &row)?;
        if let Some(pos) = ranking.iter().position(|&c| c == labels[i]) {
            hits[pos] += 1;
        }
    }
    let mut curve = Vec::with_capacity(k);
    let mut cum = 0usize;
    for h in hits {
        cum += h;
        curve.push(cum as f64 / n as f64);
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// traces
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub image_id: usize,
    pub label: usize,
    /// λ₁ (convolutional-branch weight) per mapping unit, network order.
    pub lambda1: Vec<f64>,
}

/// One λ₁ trace per image: eval mode, no augmentation, deterministic.
pub fn extract_traces(net: &Network, ds: &Dataset, norm: &NormStats) -> Result<Vec<TraceRecord>> {
    let n_units = net.awm_units().len();
    if n_units == 0 {
        return Err(Error::invalid("trace extraction requires a network with mapping units"));
    }
    let mut records = Vec::with_capacity(ds.len());
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(128) {
        let (batch, labels) = make_batch(ds, chunk, norm, None);
        let out = net.forward(&batch, false, true)?;
        if out.lambdas.len() != n_units {
            return Err(Error::Numerical(format!(
                "captured {} lambda records, expected {n_units}",
                out.lambdas.len()
            )));
        }
        for (bi, (&id, &label)) in chunk.iter().zip(&labels).enumerate() {
            let lambda1: Vec<f64> = out.lambdas.iter().map(|rec| rec.lambda.at2(bi, 0)).collect();
            records.push(TraceRecord { image_id: id, label, lambda1 });
        }
    }
    Ok(records)
}

/// Stack traces into an n x units matrix plus labels, in record order.
pub fn trace_matrix(records: &[TraceRecord]) -> Result<(Tensor, Vec<usize>)> {
    let first = records.first().ok_or_else(|| Error::invalid("no trace records"))?;
    let d = first.lambda1.len();
    let mut data = Vec::with_capacity(records.len() * d);
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        if r.lambda1.len() != d {
            return Err(Error::invalid("inconsistent trace lengths"));
        }
        data.extend_from_slice(&r.lambda1);
        labels.push(r.label);
    }
    Ok((Tensor::new(&[records.len(), d], data)?, labels))
}

/// Image ids ordered by the per-image sum of λ₁ over all units; stable,
/// so equal sums preserve input order.
pub fn sort_by_weight_sum(records: &[TraceRecord], ascending: bool) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = records
        .iter()
        .map(|r| (r.lambda1.iter().sum::<f64>(), r.image_id))
        .collect();
    if ascending {
        keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    } else {
        keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    }
    keyed.into_iter().map(|(_, id)| id).collect()
}

// ---------------------------------------------------------------------------
// CSV formats
// ---------------------------------------------------------------------------

/// Header `kind,depth,units` then one `image_id,label,λ...` row per image.
pub fn traces_to_csv(kind: &str, depth: usize, records: &[TraceRecord]) -> Result<String> {
    let first = records.first().ok_or_else(|| Error::invalid("no trace records"))?;
    let units = first.lambda1.len();
    let mut out = format!("{kind},{depth},{units}\n");
    for r in records {
        if r.lambda1.len() != units {
            return Err(Error::invalid("inconsistent trace lengths"));
        }
        out.push_str(&format!("{},{}", r.image_id, r.label));
        for v in &r.lambda1 {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn traces_from_csv(text: &str) -> Result<(String, usize, Vec<TraceRecord>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::invalid("empty trace file"))?;
    let hp: Vec<&str> = header.split(',').collect();
    if hp.len() != 3 {
        return Err(Error::invalid("trace header must be 'kind,depth,units'"));
    }
    let kind = hp[0].to_string();
    let depth: usize = hp[1].parse().map_err(|_| Error::invalid("bad depth in trace header"))?;
    let units: usize = hp[2].parse().map_err(|_| Error::invalid("bad unit count in trace header"))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 2 + units {
            return Err(Error::invalid(format!(
                "trace row {} has {} fields, expected {}",
                i + 2,
                parts.len(),
                2 + units
            )));
        }
        let bad = |what: &str| Error::invalid(format!("trace row {}: bad {what}", i + 2));
        records.push(TraceRecord {
            image_id: parts[0].parse().map_err(|_| bad("image id"))?,
            label: parts[1].parse().map_err(|_| bad("label"))?,
            lambda1: parts[2..]
                .iter()
                .map(|v| v.parse().map_err(|_| bad("lambda value")))
                .collect::<Result<Vec<f64>>>()?,
        });
    }
    Ok((kind, depth, records))
}

/// `rank,accuracy` pairs, one per line.
pub fn curve_to_csv(curve: &[f64]) -> String {
    let mut out = String::from("rank,accuracy\n");
    for (k, acc) in curve.iter().enumerate() {
        out.push_str(&format!("{},{acc}\n", k + 1));
    }
    out
}
