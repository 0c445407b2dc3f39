use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sandformer::autograd::Tape;
use sandformer::model::blocks::{declare_dswaffn, declare_mdta, dswaffn_paths, mdta_with_maps, Init};
use sandformer::{Binder, Branches, FusionKind, Model, ModelConfig, ParamStore, Tensor};

fn conv(cin: usize, cout: usize, k: usize, groups: usize) -> usize {
    cout * (cin / groups) * k * k + cout
}

/// Parameter count written out block by block.
fn expected_parameters(cfg: &ModelConfig) -> usize {
    let c0 = cfg.base_channels;
    let ds = cfg.downsample_per_stage;
    let mut n = conv(3, c0, 3, 1) + conv(c0, 2 * c0, 3, 1) + conv(c0, c0, 3, 1);
    let mut widths = Vec::new();
    let mut c = c0;
    for s in 0..cfg.stages {
        let co = if ds { 2 * c } else { c };
        if matches!(cfg.branches, Branches::Both | Branches::Cnn) {
            if ds {
                n += conv(c, co, 3, 1);
            }
            n += 2 * conv(co, 2 * co, 1, 1) + conv(2 * co, 2 * co, 1, 2 * co) + conv(2 * co, 2 * co, 3, 2 * co);
            n += 2 * conv(co, co, 1, 1);
        }
        if matches!(cfg.branches, Branches::Both | Branches::Transformer) {
            if ds {
                n += conv(4 * c, co, 1, 1);
            }
            let heads = if cfg.heads.len() == 1 {
                cfg.heads[0]
            } else {
                cfg.heads[s]
            };
            let hidden = (cfg.ffn_expansion as f64 * co as f64).round() as usize;
            n += 4 * co;
            n += conv(co, 3 * co, 1, 1) + conv(3 * co, 3 * co, 3, 3 * co) + heads + conv(co, co, 1, 1);
            n += conv(co, hidden, 1, 1) + conv(hidden, hidden, 1, hidden) + conv(hidden, hidden, 3, hidden);
            n += conv(hidden, co, 1, 1);
        }
        n += match cfg.fusion {
            FusionKind::Gate => conv(2 * co, 4 * co, 3, 1) + conv(2 * co, 2 * co, 3, 1) + conv(2 * co, 2 * co, 1, 1),
            FusionKind::Sk => conv(co, 2 * co, 1, 1),
            FusionKind::Add | FusionKind::None => 0,
        };
        widths.push(co);
        c = co;
    }
    if ds {
        for s in 0..cfg.stages {
            let below = if s == 0 { c0 } else { widths[s - 1] };
            n += conv(widths[s] / 4, below, 3, 1);
        }
    }
    n + conv(c0, 3, 3, 1)
}

fn topologies() -> [(Branches, FusionKind); 5] {
    [
        (Branches::Both, FusionKind::Gate),
        (Branches::Both, FusionKind::Sk),
        (Branches::Both, FusionKind::Add),
        (Branches::Cnn, FusionKind::None),
        (Branches::Transformer, FusionKind::None),
    ]
}

fn config(
    c0: usize,
    stages: usize,
    heads: Vec<usize>,
    ds: bool,
    (branches, fusion): (Branches, FusionKind),
) -> ModelConfig {
    ModelConfig {
        base_channels: c0,
        stages,
        heads,
        ffn_expansion: 2.0,
        fusion,
        branches,
        downsample_per_stage: ds,
    }
}

#[test]
fn toy_parameter_count() {
    let m = Model::<f32>::build(&ModelConfig::toy(), 0).unwrap();
    assert_eq!(m.num_parameters(), 702_133);
    assert_eq!(expected_parameters(&ModelConfig::toy()), 702_133);
}

#[test]
fn parameter_counts_and_shapes_over_a_config_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for c0 in [4, 8] {
        for stages in [1, 2, 3] {
            for ds in [true, false] {
                for topo in topologies() {
                    let heads = if ds {
                        (0..stages).map(|s| 1 << s.min(1)).collect()
                    } else {
                        vec![2]
                    };
                    let cfg = config(c0, stages, heads, ds, topo);
                    // Fully randomized weights compound through the gates; past
                    // two stages they overflow f32, so deeper nets use the normal init.
                    let m = Model::<f32>::build_with(&cfg, 3, stages > 2).unwrap();
                    assert_eq!(m.num_parameters(), expected_parameters(&cfg), "{cfg:?}");

                    let k = cfg.size_multiple();
                    for (h, w) in [(k, k), (2 * k, 3 * k)] {
                        let x = Tensor::from_fn(&[3, h, w], |_| rng.gen::<f32>());
                        let y = m.infer(&x).unwrap_or_else(|e| panic!("{cfg:?} {h}x{w}: {e}"));
                        assert_eq!(y.shape(), &[3, h, w]);
                        assert!(y.is_finite());
                    }
                    if k > 1 {
                        assert!(m.infer(&Tensor::<f32>::zeros(&[3, k + 1, k])).is_err());
                    }
                }
            }
        }
    }
}

#[test]
fn fusion_variants_are_distinct_networks() {
    let x = Tensor::from_fn(&[3, 8, 8], |i| ((i * 37) % 101) as f32 / 101.0);
    let mut names: Vec<BTreeSet<String>> = Vec::new();
    let mut outputs: Vec<Tensor<f32>> = Vec::new();
    for topo in topologies() {
        let m = Model::<f32>::build_with(&config(8, 2, vec![2], true, topo), 5, false).unwrap();
        names.push(m.params.names().map(String::from).collect());
        outputs.push(m.infer(&x).unwrap());
    }
    for i in 0..5 {
        for j in i + 1..5 {
            assert_ne!(names[i], names[j], "variants {i} and {j} share a parameter layout");
            assert_ne!(
                outputs[i].data(),
                outputs[j].data(),
                "variants {i} and {j} compute the same map"
            );
        }
    }
    assert!(names[0].iter().any(|n| n.contains("fuse.conv_a")));
    assert!(names[1].iter().any(|n| n.contains("fuse.fc")));
    assert!(!names[2].iter().any(|n| n.contains("fuse")));
    assert!(!names[3].iter().any(|n| n.contains(".tr.")));
    assert!(!names[4].iter().any(|n| n.contains(".cnn.")));
}

#[test]
fn every_parameter_receives_gradient() {
    for topo in topologies() {
        let cfg = config(8, 2, vec![2], true, topo);
        let m = Model::<f64>::build_with(&cfg, 11, false).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &m.params, true);
        let x = tape.constant(Tensor::from_fn(&[3, 8, 8], |i| ((i * 13) % 17) as f64 / 17.0));
        let r = tape.constant(Tensor::from_fn(&[3, 8, 8], |i| ((i * 7) % 11) as f64 / 11.0 - 0.5));
        let loss = m.forward(&b, x).unwrap().mul(r).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        for (name, _) in m.params.iter() {
            let g = grads
                .named(name)
                .unwrap_or_else(|| panic!("{topo:?}: `{name}` not on tape"));
            assert!(g.norm_sq() > 0.0, "{topo:?}: `{name}` has zero gradient");
        }
    }
}

#[test]
fn shared_expansion_gradient_is_the_sum_of_both_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut init = Init::<f64, _>::new(&mut rng, false);
    declare_dswaffn(&mut init, "ffn", 4, 8).unwrap();
    init.perturb_all(0.1);
    let store: ParamStore<f64> = init.store;
    let x = Tensor::from_fn(&[4, 5, 5], |i| ((i * 31) % 29) as f64 / 29.0 - 0.5);
    let r = Tensor::from_fn(&[4, 5, 5], |i| ((i * 17) % 23) as f64 / 23.0 - 0.5);

    let shared = {
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, true);
        let w = b.get("ffn.expand.weight").unwrap();
        let out = dswaffn_paths(&b, "ffn", tape.constant(x.clone()), w, w).unwrap();
        let loss = out.mul(tape.constant(r.clone())).unwrap().sum().unwrap();
        tape.backward(loss).unwrap().named("ffn.expand.weight").unwrap().clone()
    };
    let tape = Tape::new();
    let b = Binder::new(&tape, &store, true);
    let w = store.get("ffn.expand.weight").unwrap().clone();
    let (w1, w3) = (tape.variable(w.clone()), tape.variable(w));
    let out = dswaffn_paths(&b, "ffn", tape.constant(x), w1, w3).unwrap();
    let loss = out.mul(tape.constant(r)).unwrap().sum().unwrap();
    let grads = tape.backward(loss).unwrap();
    let (g1, g3) = (grads.wrt(w1).unwrap(), grads.wrt(w3).unwrap());
    assert!(g1.norm_sq() > 0.0 && g3.norm_sq() > 0.0);
    for i in 0..shared.numel() {
        let sum = g1.data()[i] + g3.data()[i];
        assert!(
            (shared.data()[i] - sum).abs() <= 1e-12 * (1.0 + sum.abs()),
            "coordinate {i}"
        );
    }
}

#[test]
fn attention_maps_are_row_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut init = Init::<f64, _>::new(&mut rng, false);
    declare_mdta(&mut init, "attn", 6, 3).unwrap();
    let store = init.store;
    let tape = Tape::new();
    let b = Binder::new(&tape, &store, false);
    let x = tape.constant(Tensor::from_fn(&[6, 4, 5], |i| ((i * 11) % 13) as f64 - 6.0));
    let (out, maps) = mdta_with_maps(&b, "attn", x, 3).unwrap();
    assert_eq!(out.shape(), vec![6, 4, 5]);
    assert_eq!(maps.len(), 3);
    for m in maps {
        let v = m.value();
        assert_eq!(v.shape(), &[2, 2]);
        for row in v.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}
