//! Low-rank adapters: construction, attachment to frozen weight matrices,
//! the factored adapted forward pass, merge/unmerge, and trainable
//! parameter accounting.
//!
//! An adapter adds a trainable delta `alpha * A * B` beside a frozen base
//! matrix `W[m,n]`, with `A[m,r]` and `B[r,n]`. `B` starts at zero so a
//! freshly attached adapter leaves the model exactly unchanged.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::tape::matmul_value;
use crate::tensor::{read_tapt, write_tapt, Tape, Tensor, Var};

/// Which family of layers adapters attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetPolicy {
    /// Q/K/V/O projections of attention blocks (transformer encoders).
    AttentionProjections,
    /// 1x1 pointwise projection layers (convolutional encoders).
    PointwiseConvs,
}

impl TargetPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetPolicy::AttentionProjections => "attention_projections",
            TargetPolicy::PointwiseConvs => "pointwise_convs",
        }
    }
}

/// Shape of one adapter target: frozen base matrix identifier plus `[m, n]`.
#[derive(Debug, Clone)]
pub struct TargetSpec {
    pub target_id: String,
    pub m: usize,
    pub n: usize,
}

/// A model that can enumerate adapter targets for a policy.
pub trait LoraTargetHost {
    fn lora_targets(&self, policy: TargetPolicy) -> Result<Vec<TargetSpec>>;
    /// Total parameter count of the model (frozen included), used for the
    /// trainable-percentage report.
    fn total_param_count(&self) -> usize;
}

/// The `(A, B, alpha, r)` low-rank delta attached to one frozen base matrix.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub target_id: String,
    /// `[m, r]`, uniform init scaled by `1/sqrt(r)`.
    pub a: Tensor,
    /// `[r, n]`, zero init.
    pub b: Tensor,
    pub alpha: f64,
    pub rank: usize,
}

impl LoraAdapter {
    pub fn new(spec: &TargetSpec, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config(format!(
                "adapter rank must be >= 1 on layer {}",
                spec.target_id
            )));
        }
        if rank > spec.m.min(spec.n) {
            return Err(Error::Config(format!(
                "rank {} exceeds min(m, n) = {} on layer {} ({}x{})",
                rank,
                spec.m.min(spec.n),
                spec.target_id,
                spec.m,
                spec.n
            )));
        }
        let amp = 1.0 / (rank as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Tensor::rand_uniform(&mut rng, vec![spec.m, rank], -amp, amp);
        a.set_requires_grad(true);
        let mut b = Tensor::zeros(vec![rank, spec.n]);
        b.set_requires_grad(true);
        Ok(LoraAdapter { target_id: spec.target_id.clone(), a, b, alpha, rank })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a.shape()[0], self.b.shape()[1])
    }

    /// Dense delta `alpha * A * B`.
    pub fn effective_delta(&self) -> Tensor {
        let mut d = matmul_value(&self.a, &self.b).expect("A and B shapes consistent");
        for v in d.data_mut() {
            *v *= self.alpha;
        }
        d
    }

    /// Trainable parameters in this adapter: `r * (m + n)`.
    pub fn param_count(&self) -> usize {
        let (m, n) = self.dims();
        self.rank * (m + n)
    }
}

/// Merge an adapter into its base matrix: dense `W' = W + alpha * A * B`.
/// The base is not mutated.
pub fn merge(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let (m, n) = adapter.dims();
    if w.shape() != [m, n] {
        return Err(Error::Shape {
            op: "lora.merge",
            detail: format!("base {:?} vs adapter {}x{}", w.shape(), m, n),
        });
    }
    let delta = adapter.effective_delta();
    let mut out = w.clone();
    for (o, d) in out.data_mut().iter_mut().zip(delta.data()) {
        *o += d;
    }
    Ok(out)
}

/// Invert [`merge`]: recover the base matrix from a merged one.
pub fn unmerge(w_merged: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let (m, n) = adapter.dims();
    if w_merged.shape() != [m, n] {
        return Err(Error::Shape {
            op: "lora.unmerge",
            detail: format!("merged {:?} vs adapter {}x{}", w_merged.shape(), m, n),
        });
    }
    let delta = adapter.effective_delta();
    let mut out = w_merged.clone();
    for (o, d) in out.data_mut().iter_mut().zip(delta.data()) {
        *o -= d;
    }
    Ok(out)
}

/// Tape-level adapted linear map: `x*W + alpha*((x*A)*B)` without
/// materializing the merged matrix. Gradients flow only through the vars
/// that require them (for adaptation: `a` and `b`).
pub fn adapted_matmul(tape: &mut Tape, x: Var, w: Var, a: Var, b: Var, alpha: f64) -> Result<Var> {
    let base = tape.matmul(x, w)?;
    let xa = tape.matmul(x, a)?;
    let xab = tape.matmul(xa, b)?;
    let delta = tape.mul_scalar(xab, alpha)?;
    tape.add(base, delta)
}

/// Apply `x` through `W + alpha*A*B` via the factored path (plain tensors).
pub fn adapted_forward(x: &Tensor, w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let (m, _) = adapter.dims();
    if x.rank() != 2 || x.shape()[1] != m || w.shape() != [m, adapter.dims().1] {
        return Err(Error::Shape {
            op: "lora.adapted_forward",
            detail: format!(
                "x {:?}, W {:?}, adapter {}x{}",
                x.shape(),
                w.shape(),
                m,
                adapter.dims().1
            ),
        });
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false)?;
    let wv = tape.leaf(w, false)?;
    let av = tape.leaf(&adapter.a, false)?;
    let bv = tape.leaf(&adapter.b, false)?;
    let out = adapted_matmul(&mut tape, xv, wv, av, bv, adapter.alpha)?;
    Ok(tape.value(out).clone())
}

/// All adapters attached to one model instance, keyed by target layer.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub policy: TargetPolicy,
    adapters: Vec<LoraAdapter>,
    index: HashMap<String, usize>,
}

impl AdapterSet {
    /// Attach one adapter per target layer matched by `policy`. `A` is
    /// drawn from a zero-mean uniform distribution scaled by `1/sqrt(r)`
    /// and `B` starts at zero, so the adapted model is functionally
    /// identical to the base model before the first update.
    pub fn attach<H: LoraTargetHost>(
        host: &H,
        policy: TargetPolicy,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        let targets = host.lora_targets(policy)?;
        if targets.is_empty() {
            return Err(Error::Config(format!(
                "policy {} matches no layers on this model",
                policy.as_str()
            )));
        }
        let mut adapters = Vec::with_capacity(targets.len());
        let mut index = HashMap::new();
        for (i, spec) in targets.iter().enumerate() {
            let adapter = LoraAdapter::new(spec, rank, alpha, seed.wrapping_add(i as u64))?;
            index.insert(spec.target_id.clone(), i);
            adapters.push(adapter);
        }
        Ok(AdapterSet { policy, adapters, index })
    }

    pub fn get(&self, target_id: &str) -> Option<&LoraAdapter> {
        self.index.get(target_id).map(|i| &self.adapters[*i])
    }

    pub fn get_mut(&mut self, target_id: &str) -> Option<&mut LoraAdapter> {
        self.index.get(target_id).copied().map(move |i| &mut self.adapters[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter> {
        self.adapters.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Total trainable parameters: sum over adapters of `r * (m + n)`.
    pub fn count_trainable(&self) -> usize {
        self.adapters.iter().map(|a| a.param_count()).sum()
    }

    /// Trainable share of the full model, in percent.
    pub fn trainable_percent(&self, total_model_params: usize) -> f64 {
        100.0 * self.count_trainable() as f64 / total_model_params as f64
    }

    /// Write adapters as TAPT tensors plus a manifest of
    /// `(target_id, m, n, r, alpha)` records.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, ad) in self.adapters.iter().enumerate() {
            let (m, n) = ad.dims();
            let a_file = format!("adapter{:03}_a.tapt", i);
            let b_file = format!("adapter{:03}_b.tapt", i);
            write_tapt(&dir.join(&a_file), &ad.a)?;
            write_tapt(&dir.join(&b_file), &ad.b)?;
            entries.push(AdapterManifestEntry {
                target_id: ad.target_id.clone(),
                m,
                n,
                rank: ad.rank,
                alpha: ad.alpha,
                a_file,
                b_file,
            });
        }
        let manifest = AdapterManifest { policy: self.policy, adapters: entries };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Data(format!("adapter manifest encode: {}", e)))?;
        std::fs::write(dir.join("adapters.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(dir.join("adapters.json"))?;
        let manifest: AdapterManifest = serde_json::from_str(&raw)
            .map_err(|e| Error::Data(format!("adapter manifest decode: {}", e)))?;
        let mut adapters = Vec::new();
        let mut index = HashMap::new();
        for (i, e) in manifest.adapters.iter().enumerate() {
            let mut a = read_tapt(&dir.join(&e.a_file))?;
            let mut b = read_tapt(&dir.join(&e.b_file))?;
            if a.shape() != [e.m, e.rank] || b.shape() != [e.rank, e.n] {
                return Err(Error::Data(format!(
                    "adapter {} tensor shapes disagree with manifest",
                    e.target_id
                )));
            }
            a.set_requires_grad(true);
            b.set_requires_grad(true);
            index.insert(e.target_id.clone(), i);
            adapters.push(LoraAdapter {
                target_id: e.target_id.clone(),
                a,
                b,
                alpha: e.alpha,
                rank: e.rank,
            });
        }
        Ok(AdapterSet { policy: manifest.policy, adapters, index })
    }
}

#[derive(Serialize, Deserialize)]
struct AdapterManifest {
    policy: TargetPolicy,
    adapters: Vec<AdapterManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct AdapterManifestEntry {
    target_id: String,
    m: usize,
    n: usize,
    rank: usize,
    alpha: f64,
    a_file: String,
    b_file: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn spec(id: &str, m: usize, n: usize) -> TargetSpec {
        TargetSpec { target_id: id.to_string(), m, n }
    }

    struct FakeHost {
        targets: Vec<TargetSpec>,
        total: usize,
    }

    impl LoraTargetHost for FakeHost {
        fn lora_targets(&self, _policy: TargetPolicy) -> Result<Vec<TargetSpec>> {
            Ok(self.targets.clone())
        }
        fn total_param_count(&self) -> usize {
            self.total
        }
    }

    #[test]
    fn rank_exceeding_min_dim_names_the_layer() {
        let err = LoraAdapter::new(&spec("block1.pointwise", 8, 4), 5, 1.0, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("block1.pointwise") && msg.contains("rank 5"), "{}", msg);
    }

    #[test]
    fn fresh_adapter_has_zero_delta() {
        let ad = LoraAdapter::new(&spec("w", 6, 5), 2, 1.3, 42).unwrap();
        assert!(ad.effective_delta().data().iter().all(|v| *v == 0.0));
        assert!(ad.a.requires_grad() && ad.b.requires_grad());
    }

    #[test]
    fn hand_case_identity_base() {
        // W = I2, A = [[1],[0]], B = [[0,2]], alpha = 1  =>  W' = [[1,2],[0,1]]
        let mut ad = LoraAdapter::new(&spec("w", 2, 2), 1, 1.0, 0).unwrap();
        ad.a = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        ad.b = Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap();
        let merged = merge(&Tensor::eye(2), &ad).unwrap();
        assert_eq!(merged.data(), &[1.0, 2.0, 0.0, 1.0]);

        let x = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
        let out = adapted_forward(&x, &Tensor::eye(2), &ad).unwrap();
        // x * W' = [3, 6 - 1] = [3, 5]
        assert!((out.data()[0] - 3.0).abs() < 1e-15 && (out.data()[1] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_zero_equals_base_forward() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::rand_uniform(&mut rng, vec![4, 3], -1.0, 1.0);
        let mut ad = LoraAdapter::new(&spec("w", 4, 3), 2, 0.0, 7).unwrap();
        ad.b = Tensor::rand_uniform(&mut rng, vec![2, 3], -1.0, 1.0);
        let x = Tensor::rand_uniform(&mut rng, vec![2, 4], -1.0, 1.0);
        let adapted = adapted_forward(&x, &w, &ad).unwrap();
        let base = matmul_value(&x, &w).unwrap();
        assert!(adapted.value_eq(&base));
    }

    #[test]
    fn merge_with_zero_b_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let w = Tensor::rand_uniform(&mut rng, vec![5, 5], -1.0, 1.0);
        let ad = LoraAdapter::new(&spec("w", 5, 5), 3, 2.0, 8).unwrap();
        assert!(merge(&w, &ad).unwrap().bit_eq(&w));
    }

    #[test]
    fn unmerge_restores_base() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let w = Tensor::rand_uniform(&mut rng, vec![6, 4], -1.0, 1.0);
        let mut ad = LoraAdapter::new(&spec("w", 6, 4), 2, 0.7, 9).unwrap();
        ad.b = Tensor::rand_uniform(&mut rng, vec![2, 4], -1.0, 1.0);
        let merged = merge(&w, &ad).unwrap();
        let back = unmerge(&merged, &ad).unwrap();
        assert!(back.max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn single_adapter_count_formula() {
        let ad = LoraAdapter::new(&spec("w", 8, 8), 2, 1.0, 0).unwrap();
        assert_eq!(ad.param_count(), 32);
    }

    #[test]
    fn count_doubles_with_rank() {
        let host = FakeHost {
            targets: vec![spec("a", 32, 32), spec("b", 32, 16), spec("c", 16, 32)],
            total: 100_000,
        };
        // Geometric progression as r doubles: each count exactly twice the last.
        let mut last = None;
        for r in [2usize, 4, 8, 16] {
            let set = AdapterSet::attach(&host, TargetPolicy::PointwiseConvs, r, 1.0, 3).unwrap();
            let count = set.count_trainable();
            let expect: usize = host.targets.iter().map(|t| r * (t.m + t.n)).sum();
            assert_eq!(count, expect);
            if let Some(prev) = last {
                assert_eq!(count, 2 * prev);
            }
            last = Some(count);
        }
    }

    #[test]
    fn save_load_roundtrip_preserves_bits() {
        let host = FakeHost { targets: vec![spec("x", 8, 6), spec("y", 6, 8)], total: 1000 };
        let mut set = AdapterSet::attach(&host, TargetPolicy::PointwiseConvs, 3, 0.5, 11).unwrap();
        // Give B nonzero content so the roundtrip is not trivially zeros.
        for ad in set.iter_mut() {
            for (i, v) in ad.b.data_mut().iter_mut().enumerate() {
                *v = (i as f64) * 0.25 - 1.0;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        let back = AdapterSet::load(dir.path()).unwrap();
        assert_eq!(back.len(), set.len());
        for (a, b) in set.iter().zip(back.iter()) {
            assert_eq!(a.target_id, b.target_id);
            assert!(a.a.bit_eq(&b.a) && a.b.bit_eq(&b.b));
            assert_eq!(a.alpha, b.alpha);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn factored_path_matches_merged_path(seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (m, n, r) = (6usize, 5usize, 2usize);
            let w = Tensor::rand_uniform(&mut rng, vec![m, n], -1.0, 1.0);
            let mut ad = LoraAdapter::new(&spec("w", m, n), r, 0.75, seed).unwrap();
            ad.b = Tensor::rand_uniform(&mut rng, vec![r, n], -1.0, 1.0);
            let x = Tensor::rand_uniform(&mut rng, vec![3, m], -1.0, 1.0);

            let factored = adapted_forward(&x, &w, &ad).unwrap();
            let merged = merge(&w, &ad).unwrap();
            let through_merged = matmul_value(&x, &merged).unwrap();
            prop_assert!(factored.max_abs_diff(&through_merged) < 1e-10);
        }
    }
}
