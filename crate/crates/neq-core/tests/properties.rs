//! Property tests for the spec-level invariants: velocity recurrence vs
//! closed form, stability bounds, scale invariance, cost-model monotonicity,
//! and container round trips.

use neq_core::data::{gen_synthetic, load_idx_dataset, save_idx_dataset, SyntheticKind, SyntheticSpec};
use neq_core::flops::{bprop_flops, layer_costs};
use neq_core::model::{build_model, ArchSpec, FreezeMask, NeuronId};
use neq_core::optim::OptimizerKind;
use neq_core::tracker::{closed_form_velocity, phi, update_velocity, EquilibriumState, NeuronSignature};

use proptest::prelude::*;

fn neuron() -> NeuronId {
    NeuronId { layer: 0, index: 0 }
}

/// Iterate the recurrence over a phi history, starting from absent velocity.
fn recurrence_velocities(history: &[f64], mu: f64) -> Vec<f64> {
    let mut st = EquilibriumState::<f64>::new(neuron());
    st.prev_phi = Some(history[0]);
    history[1..].iter().map(|&p| update_velocity(&mut st, p, mu).unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// The recurrence and the closed form agree at every step of any history.
    #[test]
    fn recurrence_equals_closed_form(
        history in prop::collection::vec(0.0f64..=1.0, 2..40),
        mu_idx in 0usize..4,
    ) {
        let mu = [0.0, 0.3, 0.5, 0.9][mu_idx];
        let vs = recurrence_velocities(&history, mu);
        for (t, v) in vs.iter().enumerate() {
            let oracle = closed_form_velocity(&history, mu, t + 1).unwrap();
            prop_assert!((v - oracle).abs() < 1e-9, "t={} v={v} oracle={oracle}", t + 1);
        }
    }

    /// With phi in [0,1] and mu <= 0.5, |v| never exceeds 2.
    #[test]
    fn velocity_stays_bounded_below_half_momentum(
        history in prop::collection::vec(0.0f64..=1.0, 2..60),
        mu in 0.0f64..=0.5,
    ) {
        for v in recurrence_velocities(&history, mu) {
            prop_assert!(v.abs() <= 2.0, "|v| = {} escaped the bound", v.abs());
        }
    }

    /// Positive scaling of raw outputs leaves signatures and phi unchanged.
    #[test]
    fn signature_scale_invariance(
        raw in prop::collection::vec(-10.0f64..10.0, 1..50),
        lambda in prop::sample::select(vec![0.1f64, 3.7, 1000.0, 1e-3, 42.0]),
    ) {
        let base = NeuronSignature::from_raw(neuron(), 2, &raw);
        let scaled_raw: Vec<f64> = raw.iter().map(|v| v * lambda).collect();
        let scaled = NeuronSignature::from_raw(neuron(), 2, &scaled_raw);
        prop_assert_eq!(base.zero, scaled.zero);
        let prev = NeuronSignature::from_raw(neuron(), 1, &raw);
        let p_base = phi(&base, &prev).unwrap();
        let p_scaled = phi(&scaled, &prev).unwrap();
        prop_assert!((p_base - p_scaled).abs() < 1e-12);
    }

    /// Freezing additional neurons never increases the backward cost.
    #[test]
    fn bprop_flops_monotone_in_mask(
        hidden in 1usize..20,
        channels in 1usize..5,
        seed in 0u64..50,
        batch in 1usize..8,
    ) {
        let arch = ArchSpec::SmallCnn {
            in_shape: [1, 8, 8],
            channels: vec![channels, channels + 1],
            classes: hidden.max(2),
        };
        let model = build_model::<f32>(&arch, seed).unwrap();
        let costs = layer_costs(&model, OptimizerKind::Sgd).unwrap();

        // Random mask, then a strictly larger one.
        let mut rng_state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let mut next = || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            rng_state
        };
        let mut small = FreezeMask::all_unfrozen(&model.layers);
        let mut large = FreezeMask::all_unfrozen(&model.layers);
        for id in model.tracked_neurons() {
            let r = next() % 4;
            if r == 0 {
                small.set(id, true);
                large.set(id, true);
            } else if r == 1 {
                large.set(id, true);
            }
        }
        let f_small = bprop_flops(&costs, &small, batch, true).unwrap();
        let f_large = bprop_flops(&costs, &large, batch, true).unwrap();
        prop_assert!(f_large <= f_small, "freezing more increased cost: {f_large} > {f_small}");
    }

    /// IDX datasets round-trip bit-exactly.
    #[test]
    fn idx_roundtrip(n in 0usize..40, seed in 0u64..100, img in prop::sample::select(vec![4usize, 7, 10])) {
        let ds = gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::Rings,
            n,
            noise: 0.4,
            label_noise: 0.2,
            classes: 3,
            image_size: img,
            seed,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let img_p = dir.path().join("i.idx");
        let lab_p = dir.path().join("l.idx");
        save_idx_dataset(&ds, &img_p, &lab_p).unwrap();
        let back = load_idx_dataset(&img_p, &lab_p).unwrap();
        prop_assert_eq!(back.data, ds.data);
        prop_assert_eq!(back.labels, ds.labels);
        prop_assert_eq!(back.shape, ds.shape);
    }
}
