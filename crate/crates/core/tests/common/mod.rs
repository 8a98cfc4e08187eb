//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use mtlseg::gradcheck::{grad_check, GradCheckReport};
use mtlseg::graph::{Graph, Var};
use mtlseg::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const OP_TOL: f64 = 1e-6;
pub const OP_EPS: f64 = 1e-6;
pub const OP_SEEDS: [u64; 3] = [1, 2, 3];

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
}

fn case<F>(name: &'static str, shapes: &[&[usize]], build: F) -> OpCase
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
{
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// One case per differentiable graph operation.
pub fn op_cases() -> Vec<OpCase> {
    let labels = [0u8, 1, 1, 0, 1, 0];
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])),
        case("matmul_bt", &[&[3, 4], &[5, 4]], |g, v| {
            g.matmul_bt(v[0], v[1])
        }),
        case("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1])),
        case("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1])),
        case("add_bias", &[&[2, 3, 4], &[4]], |g, v| {
            g.add_bias(v[0], v[1])
        }),
        case("scale", &[&[7]], |g, v| g.scale(v[0], -0.37)),
        case("gelu", &[&[4, 5]], |g, v| {
            let x = g.scale(v[0], 3.0)?;
            g.gelu(x)
        }),
        case("softmax", &[&[5]], |g, v| g.softmax(v[0])),
        case("softmax rows", &[&[3, 6]], |g, v| g.softmax(v[0])),
        case("layer_norm", &[&[4, 6], &[6], &[6]], |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        }),
        case("conv2d", &[&[5, 5, 2], &[3, 3, 2, 3], &[3]], |g, v| {
            g.conv2d(v[0], v[1], v[2], 2, 1)
        }),
        case(
            "conv2d patch",
            &[&[8, 8, 3], &[7, 7, 3, 2], &[2]],
            |g, v| g.conv2d(v[0], v[1], v[2], 4, 3),
        ),
        case("depthwise", &[&[5, 4, 3], &[3, 3, 3], &[3]], |g, v| {
            g.depthwise_conv2d(v[0], v[1], v[2], 1, 1)
        }),
        case("upsample x2", &[&[3, 2, 2]], |g, v| {
            g.upsample_bilinear(v[0], 2)
        }),
        case("upsample x4", &[&[2, 3, 1]], |g, v| {
            g.upsample_bilinear(v[0], 4)
        }),
        case("space_to_depth", &[&[4, 6, 2]], |g, v| {
            g.space_to_depth(v[0], 2)
        }),
        case("reshape", &[&[4, 3]], |g, v| g.reshape(v[0], &[2, 2, 3])),
        case("slice_last", &[&[4, 6]], |g, v| g.slice_last(v[0], 2, 3)),
        case("concat_last", &[&[2, 3, 2], &[2, 3, 1]], |g, v| {
            g.concat_last(&[v[0], v[1]])
        }),
        case("sum", &[&[2, 5]], |g, v| g.sum(v[0])),
        case("mean", &[&[3, 3]], |g, v| g.mean(v[0])),
        case("cross_entropy", &[&[2, 3, 2]], move |g, v| {
            let x = g.scale(v[0], 2.0)?;
            g.cross_entropy(x, &labels)
        }),
        case("attention", &[&[6, 4], &[3, 4], &[3, 4]], |g, v| {
            let (out, _) = mtlseg::nn::multi_head_attention(g, v[0], v[1], v[2], 2)?;
            Ok(out)
        }),
    ]
}

/// `sum(y * w)` with a fixed random weighting, so no coordinate of the
/// gradient is trivially uniform.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = g.input(Tensor::uniform(g.shape(y), 0.5, 1.5, &mut rng));
    let p = g.mul(y, w)?;
    g.sum(p)
}

pub fn check_op(case: &OpCase, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<Tensor<f64>> = case
        .shapes
        .iter()
        .map(|s| Tensor::uniform(s, -1.0, 1.0, &mut rng))
        .collect();
    grad_check(
        |g, v| {
            let y = (case.build)(g, v)?;
            weighted_sum(g, y, seed)
        },
        &params,
        OP_EPS,
    )
}
