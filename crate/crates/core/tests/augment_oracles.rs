//! Channel-statistic transfer and masking against direct computations.

use rand::Rng as _;
use stok::augment::{color_adapt, DEFAULT_EPS};
use stok::codec::EmbeddingGrid;
use stok::mtm::{apply_mask, mtm_loss, MaskSpec};
use stok::nn::{DType, Device, Tensor};
use stok::rng::seeded;

fn random_grid(h: usize, w: usize, d: usize, rng: &mut impl rand::Rng) -> EmbeddingGrid {
    let scale: Vec<f32> = (0..d).map(|_| rng.random_range(0.1f32..3.0)).collect();
    let shift: Vec<f32> = (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    let values = (0..h * w * d).map(|i| shift[i % d] + scale[i % d] * rng.random_range(-1.0f32..1.0)).collect();
    EmbeddingGrid::new(h, w, d, values).unwrap()
}

fn channel(z: &EmbeddingGrid, c: usize) -> Vec<f64> {
    z.values.iter().skip(c).step_by(z.d).map(|v| *v as f64).collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

#[test]
fn color_adapt_matches_direct_formula() {
    let mut rng = seeded(1);
    for _ in 0..200 {
        let a = random_grid(4, 4, 6, &mut rng);
        let b = random_grid(3, 5, 6, &mut rng);
        let out = color_adapt(&a, &b, DEFAULT_EPS).unwrap();
        for c in 0..6 {
            let (ma, sa) = mean_std(&channel(&a, c));
            let (mb, sb) = mean_std(&channel(&b, c));
            let got = channel(&out, c);
            for (x, y) in channel(&a, c).iter().zip(&got) {
                let want = sb * (x - ma) / (sa + DEFAULT_EPS) + mb;
                assert!((want - y).abs() < 1e-5, "{want} vs {y}");
            }
            assert!((mean_std(&got).0 - mb).abs() < 1e-5);
            // order within the channel is preserved
            let src = channel(&a, c);
            for i in 0..src.len() {
                for j in 0..src.len() {
                    if src[i] < src[j] {
                        assert!(got[i] <= got[j]);
                    }
                }
            }
        }
    }
}

#[test]
fn masking_counts_and_visible_rows() {
    let mut rng = seeded(2);
    for n in [1usize, 4, 16, 64] {
        for ratio in [0.0, 0.1, 0.4, 0.5, 0.75, 1.0] {
            let z = random_grid(1, n, 3, &mut rng);
            let (vis, spec) = apply_mask(&z, ratio, &mut rng).unwrap();
            let want = (ratio * n as f64).round() as usize;
            assert_eq!(spec.masked.len(), want);
            assert_eq!(spec.visible.len(), n - want);
            let mut all: Vec<usize> = spec.masked.iter().chain(&spec.visible).copied().collect();
            all.sort();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            for (i, &(y, x)) in vis.positions.iter().enumerate() {
                assert_eq!(y * n + x, spec.visible[i]);
                assert_eq!(&vis.values[i * 3..i * 3 + 3], z.cell(y * n + x));
            }
        }
    }
    assert!(MaskSpec::from_masked(4, vec![4]).is_err());
}

#[test]
fn loss_ignores_visible_positions() {
    let (n, k) = (6usize, 5usize);
    let mut rng = seeded(3);
    let data: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let logits = stok::nn::Tensor::from_vec(data.clone(), (n, k), &Device::Cpu).unwrap();
    let var = candle_var(&logits);
    let targets: Vec<u32> = (0..n as u32).map(|i| i % k as u32).collect();
    let masked = vec![1usize, 4];
    let loss = mtm_loss(var.as_tensor(), &targets, &masked).unwrap();
    let g: Vec<Vec<f64>> = loss.backward().unwrap().get(var.as_tensor()).unwrap().to_vec2().unwrap();
    for (row, grad) in g.iter().enumerate() {
        if !masked.contains(&row) {
            assert!(grad.iter().all(|v| *v == 0.0), "row {row}: {grad:?}");
        }
    }
    // mean of -log softmax over the masked rows
    let mut want = 0.0;
    for &r in &masked {
        let row = &data[r * k..(r + 1) * k];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - row[targets[r] as usize];
    }
    want /= masked.len() as f64;
    let got: f64 = loss.to_scalar().unwrap();
    assert!((got - want).abs() < 1e-12);

    let uniform = Tensor::zeros((n, 512), DType::F64, &Device::Cpu).unwrap();
    let l: f64 = mtm_loss(&uniform, &targets, &masked).unwrap().to_scalar().unwrap();
    assert!((l - 512f64.ln()).abs() < 1e-9);
}

fn candle_var(t: &Tensor) -> stok::nn::Var {
    stok::nn::Var::from_tensor(t).unwrap()
}
