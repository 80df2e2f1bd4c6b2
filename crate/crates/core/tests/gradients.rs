//! Reverse-mode gradients against central finite differences, f64.

use linattn_core::attention::{self, AttentionBlockParams, BlockVars};
use linattn_core::autodiff::gradcheck::{check_graph, CheckOptions};
use linattn_core::network::{self, Fusion, ManetConfig, ParamVars, ResNeXtBlockConfig};
use linattn_core::tensor::ops::ConvSpec;
use linattn_core::{Graph, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

/// Runs the check over `SEEDS` seeds; `make` builds the named inputs.
fn check_seeds<M, F>(what: &str, make: M, build: F)
where
    M: Fn(&mut ChaCha8Rng) -> Vec<(&'static str, Tensor<f64>)>,
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Copy,
{
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let inputs = make(&mut rng(seed));
        let opts = CheckOptions {
            seed,
            ..CheckOptions::default()
        };
        let r = check_graph(&inputs, build, &opts).unwrap();
        assert!(r.checked > 0, "{what}: nothing checked");
        worst = worst.max(r.rel_err);
        assert!(r.rel_err <= TOL, "{what} seed {seed}: {r:?}");
    }
    eprintln!("{what}: worst relative error {worst:.2e}");
}

fn two(shape_a: &'static [usize], shape_b: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Vec<(&'static str, Tensor<f64>)> {
    move |r| vec![("a", randn(shape_a, r)), ("b", randn(shape_b, r))]
}

fn one(shape: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Vec<(&'static str, Tensor<f64>)> {
    move |r| vec![("a", randn(shape, r))]
}

#[test]
fn matrix_products() {
    check_seeds("matmul", two(&[3, 4], &[4, 5]), |g, v| g.matmul(v[0], v[1]));
    check_seeds("matmul_nt", two(&[3, 4], &[5, 4]), |g, v| g.matmul_nt(v[0], v[1]));
    check_seeds("matmul_tn", two(&[4, 3], &[4, 5]), |g, v| g.matmul_tn(v[0], v[1]));
    check_seeds("transpose", one(&[3, 5]), |g, v| g.transpose(v[0]));
}

#[test]
fn elementwise() {
    check_seeds("add", two(&[2, 3, 4], &[2, 3, 4]), |g, v| g.add(v[0], v[1]));
    check_seeds("sub", two(&[6], &[6]), |g, v| g.sub(v[0], v[1]));
    check_seeds("mul", two(&[3, 3], &[3, 3]), |g, v| g.mul(v[0], v[1]));
    check_seeds("scale_by", two(&[2, 5], &[1]), |g, v| g.scale_by(v[0], v[1]));
    check_seeds("scale", one(&[7]), |g, v| g.scale(v[0], -1.75));
    check_seeds("softplus", one(&[4, 4]), |g, v| Ok(g.softplus(v[0])));
    check_seeds("relu", one(&[4, 4]), |g, v| Ok(g.relu(v[0])));
    check_seeds("sum", one(&[3, 2]), |g, v| Ok(g.sum(v[0])));
}

#[test]
fn row_and_shape_ops() {
    check_seeds("softmax_rows", one(&[4, 6]), |g, v| g.softmax_rows(v[0]));
    check_seeds("reshape", one(&[2, 6]), |g, v| g.reshape(v[0], &[3, 4]));
    check_seeds("col_sums", one(&[5, 3]), |g, v| g.col_sums(v[0]));
    check_seeds("div_rows", two(&[5, 3], &[5, 1]), |g, v| {
        let den = g.softplus(v[1]);
        g.div_rows(v[0], den)
    });
    check_seeds("concat_channels", two(&[2, 3, 3], &[3, 3, 3]), |g, v| g.concat_channels(v[0], v[1]));
}

#[test]
fn convolutions() {
    check_seeds("conv2d", two(&[4, 6, 6], &[6, 2, 3, 3]), |g, v| {
        g.conv2d(v[0], v[1], ConvSpec::new(2, 1, 2))
    });
    check_seeds("conv2d 1x1", two(&[3, 4, 5], &[2, 3, 1, 1]), |g, v| {
        g.conv2d(v[0], v[1], ConvSpec::default())
    });
    check_seeds("conv_transpose2d k2 s2", two(&[3, 3, 3], &[3, 2, 2, 2]), |g, v| {
        g.conv_transpose2d(v[0], v[1], 2)
    });
    check_seeds("conv_transpose2d k3 s2", two(&[2, 3, 4], &[2, 3, 3, 3]), |g, v| {
        g.conv_transpose2d(v[0], v[1], 2)
    });
    check_seeds("conv_transpose2d k3 s1", two(&[2, 4, 4], &[2, 2, 3, 3]), |g, v| {
        g.conv_transpose2d(v[0], v[1], 1)
    });
}

#[test]
fn channel_ops_and_resampling() {
    check_seeds(
        "channel_affine",
        |r| vec![("x", randn(&[3, 4, 4], r)), ("s", randn(&[3], r)), ("b", randn(&[3], r))],
        |g, v| g.channel_affine(v[0], v[1], v[2]),
    );
    check_seeds("channel_bias", two(&[3, 2, 5], &[3]), |g, v| g.channel_bias(v[0], v[1]));
    check_seeds("bilinear x2", one(&[2, 3, 4]), |g, v| g.bilinear_upsample(v[0], 2));
    check_seeds("bilinear x3", one(&[1, 3, 3]), |g, v| g.bilinear_upsample(v[0], 3));
}

#[test]
fn cross_entropy() {
    const LABELS: [usize; 12] = [0, 1, 2, 3, 2, 1, 0, 0, 3, 3, 1, 2];
    check_seeds("cross_entropy", one(&[4, 3, 4]), |g, v| g.cross_entropy(v[0], &LABELS));
}

fn qkv(n: usize, dk: usize, dv: usize) -> impl Fn(&mut ChaCha8Rng) -> Vec<(&'static str, Tensor<f64>)> {
    move |r| vec![("q", randn(&[n, dk], r)), ("k", randn(&[n, dk], r)), ("v", randn(&[n, dv], r))]
}

#[test]
fn attention_mechanisms() {
    check_seeds("dot_attention", qkv(7, 3, 4), |g, v| attention::dot_attention_var(g, v[0], v[1], v[2]));
    check_seeds("kernel_attention_linear", qkv(9, 4, 5), |g, v| {
        attention::kernel_attention_linear_var(g, v[0], v[1], v[2])
    });
    check_seeds(
        "kam_forward",
        |r| {
            vec![
                ("x", randn(&[4, 3, 3], r)),
                ("wq", randn(&[4, 2], r)),
                ("wk", randn(&[4, 2], r)),
                ("wv", randn(&[4, 4], r)),
                ("gamma", randn(&[1], r)),
            ]
        },
        |g, v| attention::kam_forward_var(g, v[0], v[1], v[2], v[3], v[4]),
    );
    check_seeds(
        "cam_forward",
        |r| vec![("x", randn(&[3, 4, 3], r).map(|x| 0.5 * x)), ("beta", randn(&[1], r))],
        |g, v| attention::cam_forward_var(g, v[0], v[1]),
    );
}

#[test]
fn attention_block() {
    check_seeds(
        "attention_block",
        |r| {
            let mut p = AttentionBlockParams::<f64>::init(5, 4, r).unwrap();
            p.kam.gamma = 0.7;
            p.beta = -0.4;
            vec![
                ("low", randn(&[2, 3, 4], r)),
                ("high", randn(&[3, 3, 4], r)),
                ("fw", p.fuse_weight),
                ("fb", randn(&[4], r)),
                ("wq", p.kam.proj.wq),
                ("wk", p.kam.proj.wk),
                ("wv", p.kam.proj.wv),
                ("gamma", Tensor::scalar(p.kam.gamma)),
                ("beta", Tensor::scalar(p.beta)),
            ]
        },
        |g, v| {
            let block = BlockVars {
                fuse_weight: v[2],
                fuse_bias: v[3],
                wq: v[4],
                wk: v[5],
                wv: v[6],
                gamma: v[7],
                beta: v[8],
            };
            attention::attention_block_var(g, v[0], v[1], &block)
        },
    );
}

fn named_params(p: &network::ModelParams<f64>) -> Vec<(String, Tensor<f64>)> {
    p.iter().map(|(k, t)| (k.to_string(), t.clone())).collect()
}

fn param_vars(names: &[String], vars: &[Var]) -> ParamVars {
    names.iter().zip(vars).map(|(n, &v)| (n.to_string(), v)).collect()
}

#[test]
fn resnext_block() {
    let cfg = ResNeXtBlockConfig {
        in_channels: 4,
        mid_channels: 4,
        out_channels: 6,
        cardinality: 2,
        stride: 2,
    };
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut p = network::ModelParams::<f64>::new(seed);
        network::init_resnext_block(&mut p, "blk", &cfg, &mut r).unwrap();
        let mut inputs = named_params(&p);
        inputs.push(("x".to_string(), randn(&[4, 6, 6], &mut r)));
        let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
        let res = check_graph(
            &inputs,
            |g, v| {
                let vars = param_vars(&names, v);
                network::resnext_block_var(g, v[v.len() - 1], &cfg, &vars, "blk")
            },
            &CheckOptions {
                seed,
                ..CheckOptions::default()
            },
        )
        .unwrap();
        assert!(res.rel_err <= TOL, "seed {seed}: {res:?}");
        assert!(res.checked > res.skipped * 10, "seed {seed}: {res:?}");
    }
}

/// Smallest network that still runs every stage at 32×32 input.
pub fn gradcheck_config() -> ManetConfig {
    ManetConfig {
        input_channels: 3,
        stage_channels: [4, 4, 4, 8, 8],
        cardinality: 2,
        num_classes: 3,
    }
}

#[test]
fn full_network_cross_entropy() {
    let cfg = gradcheck_config();
    for seed in 0..SEEDS {
        let mut p = network::init_params::<f64>(&cfg, seed).unwrap();
        // live attention branches so their parameters get nonzero gradients
        p.set_attention_scales(0.5);
        let sample = &network::data::generate_synthetic_dataset::<f64>(1, 32, 3, seed).unwrap()[0];
        let inputs = named_params(&p);
        let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
        let res = check_graph(
            &inputs,
            |g, v| {
                let vars = param_vars(&names, v);
                let x = g.input(sample.image.clone());
                let logits = network::manet_var(g, x, &cfg, &vars, Fusion::Attention)?;
                g.cross_entropy(logits, &sample.labels)
            },
            &CheckOptions {
                seed,
                coords_per_input: Some(3),
                ..CheckOptions::default()
            },
        )
        .unwrap();
        assert!(res.rel_err <= TOL, "seed {seed}: {res:?}");
        assert!(res.checked >= 100, "seed {seed}: {res:?}");
    }
}
