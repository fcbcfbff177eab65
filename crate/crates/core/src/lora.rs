//! Low-rank adapters: construction, forward contribution, merging,
//! parameter counting, and checkpoint filtering.
//!
//! An adapter adds `(alpha/r) * B (A x)` to the output of a frozen linear
//! layer. `B` starts at zero so a fresh adapter leaves the base function
//! untouched; only `A` and `B` ever receive gradient.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::numerics::{matmul, matmul_nt, sample_normal, Rng, Tensor};

/// Initialization scale for the `A` matrix.
pub const INIT_STD: f64 = 0.02;

/// Suffixes under which adapter tensors appear in named state maps:
/// `<layer>.<site>.lora_A` and `<layer>.<site>.lora_B`.
pub const LORA_A_SUFFIX: &str = ".lora_A";
pub const LORA_B_SUFFIX: &str = ".lora_B";

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("adapter {name}: expected input width {expected}, got {got}")]
    InputWidth {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("adapter {name}: base output shape {base:?} incompatible with adapter dims {adapter:?}")]
    BaseShape {
        name: String,
        base: Vec<usize>,
        adapter: Vec<usize>,
    },
}

/// Rank/scale/dropout knobs shared by every adapter in a set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            dropout_p: 0.1,
        }
    }
}

/// A trainable low-rank pair attached to a named base matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    name: String,
    /// `[rank, d_in]`
    pub a: Tensor,
    /// `[d_out, rank]`
    pub b: Tensor,
    rank: usize,
    alpha: f64,
    dropout_p: f64,
}

impl LoraAdapter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// Forward-time multiplier applied to the low-rank product.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }
}

/// Create an adapter: `A ~ N(0, INIT_STD^2)`, `B = 0`, so the initial
/// contribution is exactly zero.
pub fn lora_init(
    rng: &mut Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
    cfg: LoraConfig,
) -> LoraAdapter {
    assert!(d_in > 0 && d_out > 0 && cfg.rank > 0, "dims must be positive");
    assert!(
        (0.0..1.0).contains(&cfg.dropout_p),
        "dropout_p must be in [0, 1)"
    );
    let a = sample_normal(rng, cfg.rank * d_in, 0.0, INIT_STD).reshaped(&[cfg.rank, d_in]);
    let b = Tensor::zeros(&[d_out, cfg.rank]);
    LoraAdapter {
        name: name.to_string(),
        a,
        b,
        rank: cfg.rank,
        alpha: cfg.alpha,
        dropout_p: cfg.dropout_p,
    }
}

/// Inverted-scaling dropout mask: kept entries carry `1/(1-p)`, dropped
/// entries zero. `p == 0` yields the all-ones mask.
pub fn dropout_mask(rng: &mut Rng, shape: &[usize], p: f64) -> Tensor {
    assert!((0.0..1.0).contains(&p));
    let numel = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let data = (0..numel)
        .map(|_| if p > 0.0 && rng.bernoulli(p) { 0.0 } else { keep })
        .collect();
    Tensor::from_vec(shape, data).expect("length matches")
}

/// `base_out + scaling * (dropout(x) A^T) B^T` for row-major activations
/// `x: [T, d_in]`. Dropout applies to the adapter input only and only while
/// training.
pub fn lora_forward(
    adapter: &LoraAdapter,
    x: &Tensor,
    base_out: &Tensor,
    training: bool,
    rng: &mut Rng,
) -> Result<Tensor, LoraError> {
    if x.cols() != adapter.d_in() {
        return Err(LoraError::InputWidth {
            name: adapter.name.clone(),
            expected: adapter.d_in(),
            got: x.cols(),
        });
    }
    if base_out.rows() != x.rows() || base_out.cols() != adapter.d_out() {
        return Err(LoraError::BaseShape {
            name: adapter.name.clone(),
            base: base_out.shape().to_vec(),
            adapter: vec![adapter.d_out(), adapter.d_in()],
        });
    }
    let dropped = if training && adapter.dropout_p > 0.0 {
        let mask = dropout_mask(rng, x.shape(), adapter.dropout_p);
        Tensor::from_vec(
            x.shape(),
            x.data()
                .iter()
                .zip(mask.data())
                .map(|(v, m)| v * m)
                .collect(),
        )
        .expect("same shape")
    } else {
        x.clone()
    };
    let hidden = matmul_nt(&dropped, &adapter.a).expect("width checked");
    let contribution = matmul_nt(&hidden, &adapter.b).expect("rank agrees");
    base_out
        .add(&contribution.scale(adapter.scaling()))
        .map_err(|_| LoraError::BaseShape {
            name: adapter.name.clone(),
            base: base_out.shape().to_vec(),
            adapter: contribution.shape().to_vec(),
        })
}

/// Fold an adapter into a dequantized base matrix: `W' = W + scaling * B A`.
pub fn merge(base_dequant: &Tensor, adapter: &LoraAdapter) -> Result<Tensor, LoraError> {
    if base_dequant.rows() != adapter.d_out() || base_dequant.cols() != adapter.d_in() {
        return Err(LoraError::BaseShape {
            name: adapter.name.clone(),
            base: base_dequant.shape().to_vec(),
            adapter: vec![adapter.d_out(), adapter.d_in()],
        });
    }
    let delta = matmul(&adapter.b, &adapter.a).expect("rank agrees");
    Ok(base_dequant
        .add(&delta.scale(adapter.scaling()))
        .expect("same shape"))
}

/// Which linear sites carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttachmentFlags {
    pub query: bool,
    pub key: bool,
    pub value: bool,
    pub projection: bool,
    pub mlp: bool,
    pub head: bool,
}

impl AttachmentFlags {
    pub fn all() -> Self {
        AttachmentFlags {
            query: true,
            key: true,
            value: true,
            projection: true,
            mlp: true,
            head: true,
        }
    }

    pub fn none() -> Self {
        AttachmentFlags {
            query: false,
            key: false,
            value: false,
            projection: false,
            mlp: false,
            head: false,
        }
    }
}

/// Adapters keyed by the name of the base matrix they attach to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterSet {
    adapters: BTreeMap<String, LoraAdapter>,
}

impl AdapterSet {
    pub fn new() -> Self {
        AdapterSet::default()
    }

    pub fn insert(&mut self, adapter: LoraAdapter) {
        self.adapters.insert(adapter.name.clone(), adapter);
    }

    pub fn get(&self, name: &str) -> Option<&LoraAdapter> {
        self.adapters.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut LoraAdapter> {
        self.adapters.get_mut(name)
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &LoraAdapter)> {
        self.adapters.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut LoraAdapter)> {
        self.adapters.iter_mut()
    }

    /// Named trainable tensors in checkpoint naming convention.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, adapter) in &self.adapters {
            out.insert(format!("{name}{LORA_A_SUFFIX}"), adapter.a.clone());
            out.insert(format!("{name}{LORA_B_SUFFIX}"), adapter.b.clone());
        }
        out
    }
}

/// Total trainable parameters: `sum over adapters of r * (d_in + d_out)`.
pub fn trainable_param_count(set: &AdapterSet) -> usize {
    set.iter().map(|(_, a)| a.param_count()).sum()
}

/// Keep only adapter tensors from a full named-tensor state map.
pub fn filter_lora_state(full_state: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    full_state
        .iter()
        .filter(|(name, _)| name.ends_with(LORA_A_SUFFIX) || name.ends_with(LORA_B_SUFFIX))
        .map(|(name, t)| (name.clone(), t.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_cfg() -> LoraConfig {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            dropout_p: 0.1,
        }
    }

    #[test]
    fn fresh_adapter_contributes_nothing() {
        let mut rng = Rng::new(1);
        let adapter = lora_init(&mut rng, "layer0.query", 8, 6, test_cfg());
        let x = sample_normal(&mut rng, 3 * 8, 0.0, 1.0).reshaped(&[3, 8]);
        let base = sample_normal(&mut rng, 3 * 6, 0.0, 1.0).reshaped(&[3, 6]);
        let out = lora_forward(&adapter, &x, &base, false, &mut rng).unwrap();
        assert_eq!(out.data(), base.data());
    }

    #[test]
    fn same_seed_same_a() {
        let a1 = lora_init(&mut Rng::new(5), "w", 16, 16, test_cfg());
        let a2 = lora_init(&mut Rng::new(5), "w", 16, 16, test_cfg());
        assert_eq!(a1.a.data(), a2.a.data());
    }

    #[test]
    fn init_statistics() {
        // 10^4 entries of A: sample std within 0.002 of 0.02.
        let adapter = lora_init(&mut Rng::new(77), "w", 100, 1, LoraConfig {
            rank: 100,
            ..test_cfg()
        });
        let data = adapter.a.data();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let std = (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!((std - INIT_STD).abs() < 0.002, "std {std}");
    }

    #[test]
    fn hand_computed_contribution() {
        // r=1, A=[[1,0]], B=[[1],[0]], alpha=2, x=[3,5]: contribution [6,0].
        let mut rng = Rng::new(0);
        let mut adapter = lora_init(
            &mut rng,
            "w",
            2,
            2,
            LoraConfig {
                rank: 1,
                alpha: 2.0,
                dropout_p: 0.0,
            },
        );
        adapter.a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        adapter.b = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![3.0, 5.0]]).unwrap();
        let base = Tensor::zeros(&[1, 2]);
        let out = lora_forward(&adapter, &x, &base, false, &mut rng).unwrap();
        assert_eq!(out.data(), &[6.0, 0.0]);
    }

    #[test]
    fn zero_dropout_makes_training_match_inference() {
        let mut rng = Rng::new(9);
        let mut adapter = lora_init(
            &mut rng,
            "w",
            6,
            4,
            LoraConfig {
                rank: 2,
                alpha: 4.0,
                dropout_p: 0.0,
            },
        );
        adapter.b = sample_normal(&mut rng, 4 * 2, 0.0, 0.3).reshaped(&[4, 2]);
        let x = sample_normal(&mut rng, 2 * 6, 0.0, 1.0).reshaped(&[2, 6]);
        let base = Tensor::zeros(&[2, 4]);
        let train = lora_forward(&adapter, &x, &base, true, &mut Rng::new(1)).unwrap();
        let infer = lora_forward(&adapter, &x, &base, false, &mut Rng::new(2)).unwrap();
        assert_eq!(train.data(), infer.data());
    }

    #[test]
    fn dropout_mask_scales_kept_entries() {
        let mut rng = Rng::new(33);
        let mask = dropout_mask(&mut rng, &[100, 10], 0.25);
        let keep = 1.0 / 0.75;
        assert!(mask.data().iter().all(|&m| m == 0.0 || m == keep));
        let kept = mask.data().iter().filter(|&&m| m != 0.0).count();
        // Expect ~750 of 1000 kept.
        assert!((700..800).contains(&kept), "kept {kept}");
    }

    #[test]
    fn merge_neutral_cases() {
        let mut rng = Rng::new(4);
        let base = sample_normal(&mut rng, 6 * 4, 0.0, 1.0).reshaped(&[6, 4]);
        let fresh = lora_init(&mut rng, "w", 4, 6, test_cfg());
        assert_eq!(merge(&base, &fresh).unwrap().data(), base.data());

        let mut zero_alpha = lora_init(&mut rng, "w", 4, 6, LoraConfig {
            alpha: 0.0,
            ..test_cfg()
        });
        zero_alpha.b = sample_normal(&mut rng, 6 * 4, 0.0, 1.0).reshaped(&[6, 4]);
        assert_eq!(merge(&base, &zero_alpha).unwrap().data(), base.data());
    }

    #[test]
    fn merged_forward_matches_adapter_forward() {
        let mut rng = Rng::new(15);
        let (d_in, d_out) = (10, 7);
        let base = sample_normal(&mut rng, d_out * d_in, 0.0, 0.5).reshaped(&[d_out, d_in]);
        let mut adapter = lora_init(&mut rng, "w", d_in, d_out, test_cfg());
        adapter.b = sample_normal(&mut rng, d_out * 4, 0.0, 0.3).reshaped(&[d_out, 4]);
        let merged = merge(&base, &adapter).unwrap();
        for _ in 0..20 {
            let x = sample_normal(&mut rng, d_in, 0.0, 1.0).reshaped(&[1, d_in]);
            let base_out = matmul_nt(&x, &base).unwrap();
            let via_adapter = lora_forward(&adapter, &x, &base_out, false, &mut rng).unwrap();
            let via_merged = matmul_nt(&x, &merged).unwrap();
            for (a, m) in via_adapter.data().iter().zip(via_merged.data()) {
                assert!((a - m).abs() <= 1e-5, "{a} vs {m}");
            }
        }
    }

    #[test]
    fn param_count_formula() {
        let mut set = AdapterSet::new();
        let mut rng = Rng::new(2);
        set.insert(lora_init(&mut rng, "w", 64, 64, LoraConfig {
            rank: 8,
            ..test_cfg()
        }));
        assert_eq!(trainable_param_count(&set), 1024);
        assert_eq!(trainable_param_count(&AdapterSet::new()), 0);
    }

    #[test]
    fn filter_keeps_only_adapter_tensors() {
        let mut rng = Rng::new(3);
        let mut state = BTreeMap::new();
        for i in 0..10 {
            state.insert(format!("layer{i}.base"), Tensor::zeros(&[2, 2]));
        }
        let mut set = AdapterSet::new();
        set.insert(lora_init(&mut rng, "layer0.query", 4, 4, test_cfg()));
        set.insert(lora_init(&mut rng, "layer1.value", 4, 4, test_cfg()));
        state.extend(set.named_tensors());

        let filtered = filter_lora_state(&state);
        assert_eq!(filtered.len(), 4);
        assert!(filtered.keys().all(|k| k.contains(".lora_")));

        let empty = filter_lora_state(&BTreeMap::from([(
            "layer0.base".to_string(),
            Tensor::zeros(&[1]),
        )]));
        assert!(empty.is_empty());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut rng = Rng::new(6);
        let adapter = lora_init(&mut rng, "w", 4, 6, test_cfg());
        let x = Tensor::zeros(&[2, 5]);
        let base = Tensor::zeros(&[2, 6]);
        assert!(matches!(
            lora_forward(&adapter, &x, &base, false, &mut rng),
            Err(LoraError::InputWidth { .. })
        ));
        let bad_base = Tensor::zeros(&[5, 6]);
        let ok_x = Tensor::zeros(&[2, 4]);
        assert!(lora_forward(&adapter, &ok_x, &bad_base, false, &mut rng).is_err());
        assert!(merge(&Tensor::zeros(&[6, 5]), &adapter).is_err());
    }
}
