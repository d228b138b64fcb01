//! Trainable quantization pooling: a normalized-RBF membership sublayer
//! followed by mean accumulation, optionally over a 2×2 spatial split with a
//! separate codebook per region. The output histogram has a fixed length
//! regardless of how many feature vectors the image produced, which is what
//! lets one network train and classify across input sizes.

use crate::error::{Error, Result};
use crate::layers::FeatureGrid;
use crate::optim::{Param, ParamGroup, SIGMA_MIN};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

/// Initial RBF width after codebook initialization.
pub const SIGMA_INIT: f64 = 0.1;

/// Codeword centers plus per-codeword widths for one spatial region.
pub struct Codebook<T> {
    pub centers: Param<T>,
    pub sigmas: Param<T>,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(name: &str, centers: Tensor<T>, sigmas: Tensor<T>) -> Result<Self> {
        if centers.ndim() != 2 || sigmas.shape() != [centers.shape()[0]] {
            return Err(Error::Dim(format!(
                "codebook: centers {:?} incompatible with widths {:?}",
                centers.shape(),
                sigmas.shape()
            )));
        }
        let min = T::from_f64(SIGMA_MIN);
        // negated comparison so NaN widths fail the check as well
        if sigmas.data().iter().any(|&s| !(s >= min)) {
            return Err(Error::Consistency(format!(
                "codebook widths must all be >= {SIGMA_MIN}"
            )));
        }
        centers.ensure_finite("codebook centers")?;
        Ok(Self {
            centers: Param::new(format!("{name}.centers"), ParamGroup::Centers, centers),
            sigmas: Param::new(format!("{name}.sigmas"), ParamGroup::Sigma, sigmas),
        })
    }

    /// Codebook with k-means centers and all widths at [`SIGMA_INIT`].
    pub fn from_kmeans(
        name: &str,
        features: &Tensor<T>,
        codewords: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let centers = kmeans_init(features, codewords, rng)?;
        let sigmas = Tensor::full(&[codewords], T::from_f64(SIGMA_INIT));
        Self::new(name, centers, sigmas)
    }

    pub fn codewords(&self) -> usize {
        self.centers.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.value.shape()[1]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.centers, &mut self.sigmas]
    }
}

/// Logits z_k = −‖x−v_k‖₂ / σ_k together with the distances ‖x−v_k‖₂.
fn rbf_logits<T: Scalar>(x: &[T], codebook: &Codebook<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n_k, d) = (codebook.codewords(), codebook.dim());
    if x.len() != d {
        return Err(Error::Dim(format!(
            "feature vector has dim {}, codebook expects {}",
            x.len(),
            d
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature vector".into()));
    }
    let min = T::from_f64(SIGMA_MIN);
    let centers = codebook.centers.value.data();
    let sigmas = codebook.sigmas.value.data();
    let mut logits = Tensor::zeros(&[n_k]);
    let mut dists = Tensor::zeros(&[n_k]);
    for k in 0..n_k {
        let sigma = sigmas[k];
        // negated comparison so a NaN width fails too
        if !(sigma >= min) {
            return Err(Error::Consistency(format!(
                "codeword width below minimum {SIGMA_MIN}"
            )));
        }
        let row = &centers[k * d..(k + 1) * d];
        let mut sq = T::zero();
        for (&xv, &cv) in x.iter().zip(row) {
            let diff = xv - cv;
            sq = sq + diff * diff;
        }
        let dist = sq.sqrt();
        dists.data_mut()[k] = dist;
        logits.data_mut()[k] = -dist / sigma;
    }
    Ok((logits, dists))
}

/// Normalized RBF memberships of one feature vector: a stable softmax over
/// −distance/width logits. Sums to 1 with strictly positive entries.
pub fn rbf_memberships<T: Scalar>(x: &[T], codebook: &Codebook<T>) -> Result<Tensor<T>> {
    let (logits, _) = rbf_logits(x, codebook)?;
    crate::layers::softmax(&logits)
}

fn memberships_cached<T: Scalar>(
    x: &[T],
    codebook: &Codebook<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (logits, dists) = rbf_logits(x, codebook)?;
    Ok((crate::layers::softmax(&logits)?, dists))
}

/// Mean of membership vectors; the result keeps unit l¹ norm.
pub fn accumulate<T: Scalar>(memberships: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = memberships
        .first()
        .ok_or_else(|| Error::Parameter("accumulate over zero vectors".into()))?;
    let mut s = first.clone();
    for m in &memberships[1..] {
        s.add_assign(m)?;
    }
    s.scale_assign(T::one() / T::from_f64(memberships.len() as f64));
    Ok(s)
}

/// Spatial segmentation depth: the whole map, or a 2×2 quadrant split with
/// one codebook per quadrant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialLevel {
    Zero,
    One,
}

impl SpatialLevel {
    pub fn regions(self) -> usize {
        match self {
            SpatialLevel::Zero => 1,
            SpatialLevel::One => 4,
        }
    }

    pub fn from_index(level: usize) -> Result<Self> {
        match level {
            0 => Ok(SpatialLevel::Zero),
            1 => Ok(SpatialLevel::One),
            other => Err(Error::Parameter(format!(
                "spatial level must be 0 or 1, got {other}"
            ))),
        }
    }

    pub fn index(self) -> usize {
        match self {
            SpatialLevel::Zero => 0,
            SpatialLevel::One => 1,
        }
    }
}

/// Row or column ranges of the two halves of an extent. The second half
/// takes the larger share when `n` is odd, so the 5-wide split is 2 + 3.
pub(crate) fn half_ranges(n: usize) -> [std::ops::Range<usize>; 2] {
    [0..n / 2, n / 2..n]
}

/// Region index of a grid position. Level 0 has the single region 0; level 1
/// numbers the quadrants row-major: top-left 0, top-right 1, bottom-left 2,
/// bottom-right 3. On odd grids the bottom/right blocks take the extra line,
/// so the center cell of a 5×5 grid lands in the bottom-right block.
pub fn assign_region(pos: (usize, usize), grid: (usize, usize), level: SpatialLevel) -> usize {
    match level {
        SpatialLevel::Zero => 0,
        SpatialLevel::One => {
            let (r, c) = pos;
            let (h, w) = grid;
            let row_block = usize::from(r >= h / 2);
            let col_block = usize::from(c >= w / 2);
            row_block * 2 + col_block
        }
    }
}

struct BofCache<T> {
    vectors: Tensor<T>,
    region_of: Vec<usize>,
    region_counts: Vec<usize>,
    memberships: Vec<Tensor<T>>,
    distances: Vec<Tensor<T>>,
}

/// The pooling layer: per-region normalized-RBF memberships accumulated into
/// a fixed-length histogram.
pub struct BofLayer<T> {
    pub level: SpatialLevel,
    pub codebooks: Vec<Codebook<T>>,
    cache: Option<BofCache<T>>,
}

impl<T: Scalar> BofLayer<T> {
    pub fn new(level: SpatialLevel, codebooks: Vec<Codebook<T>>) -> Result<Self> {
        if codebooks.len() != level.regions() {
            return Err(Error::Dim(format!(
                "level needs {} codebooks, got {}",
                level.regions(),
                codebooks.len()
            )));
        }
        let (n_k, d) = (codebooks[0].codewords(), codebooks[0].dim());
        if codebooks
            .iter()
            .any(|cb| cb.codewords() != n_k || cb.dim() != d)
        {
            return Err(Error::Dim(
                "all region codebooks must share codeword count and dimension".into(),
            ));
        }
        Ok(Self {
            level,
            codebooks,
            cache: None,
        })
    }

    pub fn codewords(&self) -> usize {
        self.codebooks[0].codewords()
    }

    pub fn dim(&self) -> usize {
        self.codebooks[0].dim()
    }

    /// Histogram length N_S·N_K, independent of input size.
    pub fn histogram_len(&self) -> usize {
        self.level.regions() * self.codewords()
    }

    fn region_layout(&self, grid: &FeatureGrid<T>) -> (Vec<usize>, Vec<usize>) {
        let n_s = self.level.regions();
        let mut region_of = Vec::with_capacity(grid.count());
        let mut counts = vec![0usize; n_s];
        for i in 0..grid.count() {
            let r = assign_region(grid.position(i), (grid.rows, grid.cols), self.level);
            counts[r] += 1;
            region_of.push(r);
        }
        (region_of, counts)
    }

    /// Soft histogram: concatenated per-region membership means. A region
    /// that received no vectors (possible only for degenerate one-cell maps
    /// at level 1) contributes a uniform 1/N_K block.
    pub fn forward(&mut self, grid: &FeatureGrid<T>) -> Result<Tensor<T>> {
        let (n_s, n_k) = (self.level.regions(), self.codewords());
        let (region_of, counts) = self.region_layout(grid);
        let mut hist = Tensor::zeros(&[n_s * n_k]);
        let mut memberships = Vec::with_capacity(grid.count());
        let mut distances = Vec::with_capacity(grid.count());
        for i in 0..grid.count() {
            let r = region_of[i];
            let (phi, dist) = memberships_cached(grid.vector(i), &self.codebooks[r])?;
            for k in 0..n_k {
                let slot = &mut hist.data_mut()[r * n_k + k];
                *slot = *slot + phi.data()[k];
            }
            memberships.push(phi);
            distances.push(dist);
        }
        for r in 0..n_s {
            let block = &mut hist.data_mut()[r * n_k..(r + 1) * n_k];
            if counts[r] == 0 {
                block.fill(T::from_f64(1.0 / n_k as f64));
            } else {
                let inv = T::one() / T::from_f64(counts[r] as f64);
                for v in block {
                    *v = *v * inv;
                }
            }
        }
        self.cache = Some(BofCache {
            vectors: grid.vectors.clone(),
            region_of,
            region_counts: counts,
            memberships,
            distances,
        });
        Ok(hist)
    }

    /// Backward from the histogram gradient. Accumulates center and width
    /// gradients and returns the gradient w.r.t. the feature vectors as an
    /// `[N × D]` tensor. Empty regions contribute nothing (their block is
    /// constant).
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("bof backward before forward".into()))?;
        let (n_s, n_k, d) = (self.level.regions(), self.codewords(), self.dim());
        if upstream.shape() != [n_s * n_k] {
            return Err(Error::Dim(format!(
                "bof backward expects [{}], got {:?}",
                n_s * n_k,
                upstream.shape()
            )));
        }
        let n = cache.region_of.len();
        let mut grad_vectors = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let r = cache.region_of[i];
            let count = cache.region_counts[r];
            let cb = &mut self.codebooks[r];
            let phi = cache.memberships[i].data();
            let dist = cache.distances[i].data();
            let block = &upstream.data()[r * n_k..(r + 1) * n_k];
            let inv_count = T::one() / T::from_f64(count as f64);
            // dL/dφ is the same for every vector in the region: block/count.
            // Softmax backward: dL/dz_k = φ_k (g_k − Σ_m g_m φ_m).
            let mut dot = T::zero();
            for k in 0..n_k {
                dot = dot + block[k] * inv_count * phi[k];
            }
            let x = &cache.vectors.data()[i * d..(i + 1) * d];
            let gx = &mut grad_vectors.data_mut()[i * d..(i + 1) * d];
            for k in 0..n_k {
                let g = block[k] * inv_count;
                let dz = phi[k] * (g - dot);
                let sigma = cb.sigmas.value.data()[k];
                // z_k = −d_k/σ_k
                cb.sigmas.grad.data_mut()[k] =
                    cb.sigmas.grad.data()[k] + dz * dist[k] / (sigma * sigma);
                if dist[k] > T::zero() {
                    // dd/dx = (x−v_k)/d_k; subgradient 0 at d_k = 0
                    let coef = -dz / sigma / dist[k];
                    let row = k * d;
                    let centers = cb.centers.value.data();
                    for c in 0..d {
                        let diff = x[c] - centers[row + c];
                        gx[c] = gx[c] + coef * diff;
                        let slot = &mut cb.centers.grad.data_mut()[row + c];
                        *slot = *slot - coef * diff;
                    }
                }
            }
        }
        Ok(grad_vectors)
    }

    /// Hard-assignment histogram: each vector contributes a one-hot at its
    /// maximum logit (ties to the lowest index). Evaluation-only; there is
    /// deliberately no backward.
    pub fn hard_forward(&self, grid: &FeatureGrid<T>) -> Result<Tensor<T>> {
        let (n_s, n_k) = (self.level.regions(), self.codewords());
        let (region_of, counts) = self.region_layout(grid);
        let mut hist = Tensor::zeros(&[n_s * n_k]);
        for i in 0..grid.count() {
            let r = region_of[i];
            let (logits, _) = rbf_logits(grid.vector(i), &self.codebooks[r])?;
            let k = logits.argmax()?;
            let slot = &mut hist.data_mut()[r * n_k + k];
            *slot = *slot + T::one();
        }
        for r in 0..n_s {
            let block = &mut hist.data_mut()[r * n_k..(r + 1) * n_k];
            if counts[r] == 0 {
                block.fill(T::from_f64(1.0 / n_k as f64));
            } else {
                let inv = T::one() / T::from_f64(counts[r] as f64);
                for v in block {
                    *v = *v * inv;
                }
            }
        }
        Ok(hist)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.codebooks
            .iter_mut()
            .flat_map(|cb| cb.params_mut())
            .collect()
    }
}

/// Lloyd's k-means with k-means++ seeding over `[N × D]` feature vectors.
/// Runs internally in f64; stops at an assignment fixpoint or 25 iterations.
/// An emptied cluster is re-seeded to the point farthest from its assigned
/// centroid.
pub fn kmeans_init<T: Scalar>(
    features: &Tensor<T>,
    codewords: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    if features.ndim() != 2 {
        return Err(Error::Dim(format!(
            "kmeans expects [N, D] features, got {:?}",
            features.shape()
        )));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if codewords == 0 || n < codewords {
        return Err(Error::Parameter(format!(
            "kmeans needs at least as many samples as codewords ({n} < {codewords})"
        )));
    }
    let pts: Vec<f64> = features.data().iter().map(|&v| v.to_f64()).collect();
    let sq_dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
    };
    let point = |i: usize| &pts[i * d..(i + 1) * d];

    // k-means++ seeding: first center uniform, the rest sampled with
    // probability proportional to the squared distance to the nearest
    // already-chosen center.
    let mut centers: Vec<f64> = Vec::with_capacity(codewords * d);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(point(first));
    let mut best_sq = vec![f64::INFINITY; n];
    while centers.len() < codewords * d {
        let newest = &centers[centers.len() - d..];
        for i in 0..n {
            best_sq[i] = best_sq[i].min(sq_dist(point(i), newest));
        }
        let total: f64 = best_sq.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in best_sq.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // all points coincide with existing centers
            rng.random_range(0..n)
        };
        centers.extend_from_slice(point(idx));
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..25 {
        let mut next = vec![0usize; n];
        for i in 0..n {
            let mut best = f64::INFINITY;
            for k in 0..codewords {
                let dist = sq_dist(point(i), &centers[k * d..(k + 1) * d]);
                if dist < best {
                    best = dist;
                    next[i] = k;
                }
            }
        }
        // re-seed emptied clusters to the farthest point from its centroid;
        // only points whose cluster keeps at least one member are eligible,
        // so a re-seeded point is never immediately stolen back
        let mut counts = vec![0usize; codewords];
        for &a in &next {
            counts[a] += 1;
        }
        for k in 0..codewords {
            if counts[k] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[next[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(point(a), &centers[next[a] * d..(next[a] + 1) * d]);
                    let db = sq_dist(point(b), &centers[next[b] * d..(next[b] + 1) * d]);
                    da.total_cmp(&db)
                })
                .expect("some cluster holds more than one point");
            counts[next[far]] -= 1;
            next[far] = k;
            counts[k] = 1;
        }
        let converged = next == assignment;
        assignment = next;
        // recompute means
        centers.fill(0.0);
        for i in 0..n {
            let k = assignment[i];
            for (c, &v) in centers[k * d..(k + 1) * d].iter_mut().zip(point(i)) {
                *c += v;
            }
        }
        for k in 0..codewords {
            let inv = 1.0 / counts[k] as f64;
            for c in &mut centers[k * d..(k + 1) * d] {
                *c *= inv;
            }
        }
        if converged {
            break;
        }
    }
    Tensor::new(
        &[codewords, d],
        centers.into_iter().map(T::from_f64).collect(),
    )
}
