//! Acceptance suite: one check per criterion, run sequentially in a single
//! test so timings are stable, printing one PASS/FAIL line each (visible
//! with `--nocapture`). Later criteria train real models end to end through
//! the CLI binary, so this target takes tens of minutes on a 2-core box.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ca3d_core::attention::{
    caca, column_bias, inject_3d, standard_cross_attention, AttentionWeights, ZeroConv,
};
use ca3d_core::data::{load_split, Split};
use ca3d_core::diffusion::{
    cfg_combine, q_sample, sample, Condition, Direction, NoiseSchedule, SampleOptions,
};
use ca3d_core::geometry::{
    back_project, mat3_det, mat3_mul, mat3_transpose, mat3_vec, project_volume, ProjectionModel,
    View,
};
use ca3d_core::gradcheck::{check_gradients, rel_err};
use ca3d_core::metrics::{psnr, ssim_default, MetricReport};
use ca3d_core::optim::{optimizer_step, AdamW, OptimizerState};
use ca3d_core::params::ParamStore;
use ca3d_core::tensor::concat;
use ca3d_core::unet::{UNet, UNetConfig};
use ca3d_core::{Rng, RunConfig, Tensor};

struct Outcome {
    name: &'static str,
    result: Result<String, String>,
    secs: f64,
}

fn run_criterion(
    outcomes: &mut Vec<Outcome>,
    name: &'static str,
    f: impl FnOnce() -> Result<String, String>,
) {
    let start = Instant::now();
    let result = f();
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("PASS  {name} [{secs:.1}s] {detail}"),
        Err(detail) => println!("FAIL  {name} [{secs:.1}s] {detail}"),
    }
    outcomes.push(Outcome { name, result, secs });
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ca3d")
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin())
        .args(args)
        .output()
        .map_err(|e| format!("spawning ca3d: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "ca3d {:?} exited with {:?}: {}",
            args,
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn sha256_file(path: &Path) -> Result<[u8; 32], String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(Sha256::digest(&bytes).into())
}

/// Hash of every regular file under a directory, in sorted path order.
fn sha256_dir(dir: &Path) -> Result<[u8; 32], String> {
    use sha2::{Digest, Sha256};
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut hasher = Sha256::new();
    for p in paths {
        hasher.update(p.file_name().unwrap().to_string_lossy().as_bytes());
        hasher.update(std::fs::read(&p).map_err(|e| e.to_string())?);
    }
    Ok(hasher.finalize().into())
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max)
}

// -- criterion 1 -------------------------------------------------------------

fn geometry_point_oracle() -> Result<String, String> {
    let start = Instant::now();
    let model = ProjectionModel::default();
    let p = model.projection_matrix();
    let r = model.rotation_matrix();
    let pp = mat3_mul(&p, &p);
    let rtr = mat3_mul(&mat3_transpose(&r), &r);
    for i in 0..3 {
        for j in 0..3 {
            if (pp[i][j] - p[i][j]).abs() > 1e-6 {
                return Err("P*P deviates from P".into());
            }
            let id = if i == j { 1.0 } else { 0.0 };
            if (rtr[i][j] - id).abs() > 1e-6 {
                return Err("R^T R deviates from I".into());
            }
        }
    }
    if (mat3_det(&r) - 1.0).abs() > 1e-6 {
        return Err(format!("det R = {}", mat3_det(&r)));
    }
    let mut rng = Rng::new(1001);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let v = [
            rng.uniform(-100.0, 100.0) as f64,
            rng.uniform(-100.0, 100.0) as f64,
            rng.uniform(-100.0, 100.0) as f64,
        ];
        let cc = model.project_point(v, View::Cc);
        let mlo = model.project_point(v, View::Mlo);
        let cc_m = mat3_vec(&p, &v);
        let mlo_m = mat3_vec(&p, &mat3_vec(&r, &v));
        for i in 0..3 {
            worst = worst.max((cc[i] - cc_m[i]).abs());
            worst = worst.max((mlo[i] - mlo_m[i]).abs());
        }
    }
    if worst > 1e-6 {
        return Err(format!("projection deviates from matrix product by {worst:.2e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 1.0 {
        return Err(format!("runtime {secs:.2}s exceeds 1s"));
    }
    Ok(format!("1000 points, max dev {worst:.2e}"))
}

// -- criterion 2 -------------------------------------------------------------

fn back_projection_round_trip() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = Rng::new(1002);
    let d = 16usize;
    let mut worst_rt = 0.0f32;
    let mut worst_adj = 0.0f64;
    for view in [View::Cc, View::Mlo] {
        for _ in 0..20 {
            let img = Tensor::from_vec(&[16, 16], rng.normal_vec(256)).map_err(|e| e.to_string())?;
            let vol = back_project(&img, view, d).map_err(|e| e.to_string())?;
            let round = project_volume(&vol, view).map_err(|e| e.to_string())?;
            worst_rt = worst_rt.max(max_abs_diff(round.data(), img.data()));
        }
        for _ in 0..20 {
            let v = Tensor::from_vec(&[d, 16, 16], rng.normal_vec(d * 256)).map_err(|e| e.to_string())?;
            let img = Tensor::from_vec(&[16, 16], rng.normal_vec(256)).map_err(|e| e.to_string())?;
            let proj = project_volume(&v, view).map_err(|e| e.to_string())?;
            let lhs: f64 = proj
                .data()
                .iter()
                .zip(img.data())
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            let bp = back_project(&img, view, d).map_err(|e| e.to_string())?;
            let rhs: f64 = v
                .data()
                .iter()
                .zip(bp.data())
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum::<f64>()
                / d as f64;
            worst_adj = worst_adj.max((lhs - rhs).abs());
        }
    }
    if worst_rt > 1e-5 {
        return Err(format!("round trip deviates by {worst_rt:.2e}"));
    }
    if worst_adj > 1e-4 {
        return Err(format!("adjoint identity deviates by {worst_adj:.2e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 5.0 {
        return Err(format!("runtime {secs:.2}s exceeds 5s"));
    }
    Ok(format!("round trip {worst_rt:.2e}, adjoint {worst_adj:.2e} (k = 1/D)"))
}

// -- criterion 3 -------------------------------------------------------------

fn column_bias_closed_form() -> Result<String, String> {
    let bias = column_bias(4, 8, 5.0).map_err(|e| e.to_string())?;
    let n = 32usize;
    for i in 0..n {
        for j in 0..n {
            let v = bias.data()[i * n + j];
            if i % 8 == j % 8 && v != 0.0 {
                return Err(format!("same-column bias ({i},{j}) = {v}"));
            }
            if v > 0.0 {
                return Err(format!("positive bias at ({i},{j})"));
            }
            if v != bias.data()[j * n + i] {
                return Err(format!("asymmetry at ({i},{j})"));
            }
        }
    }
    let strip = column_bias(1, 6, 5.0).map_err(|e| e.to_string())?;
    let v = strip.data()[5]; // columns 0 and 5: delta = 5
    if (v + 0.5).abs() > 1e-7 {
        return Err(format!("bias(delta=5, sigma=5) = {v}, want -0.5"));
    }
    Ok(format!("bias(5,5) = {v}"))
}

// -- criterion 4 -------------------------------------------------------------

fn caca_degeneracy() -> Result<String, String> {
    let mut rng = Rng::new(1004);
    // identity projections, single head: the caca path must reproduce the
    // raw scaled-dot attention exactly when the bias is zeroed
    let (h, w, c) = (3usize, 4usize, 8usize);
    let n = h * w;
    let mut store = ParamStore::new();
    let weights = AttentionWeights::new(&mut store, "probe", c, 1, &mut rng);
    let mut eye = vec![0.0f32; c * c];
    for i in 0..c {
        eye[i * c + i] = 1.0;
    }
    for name in ["probe.wq", "probe.wk", "probe.wv", "probe.wo"] {
        let idx = store.iter().position(|(n, _)| n == name).unwrap();
        store.replace(idx, eye.clone());
    }
    let f_tar = Tensor::randn(&[1, c, h, w], &mut rng);
    let f_ref = Tensor::randn(&[1, c, h, w], &mut rng);
    let zero_bias = Tensor::zeros(&[n, n]);
    let out = caca(&store, &weights, &f_tar, &f_ref, Some(&zero_bias)).map_err(|e| e.to_string())?;

    let tokens = |t: &Tensor| -> Tensor {
        t.permute(&[0, 2, 3, 1]).unwrap().reshape(&[n, c]).unwrap()
    };
    let reference = standard_cross_attention(&tokens(&f_tar), &tokens(&f_ref), &tokens(&f_ref))
        .map_err(|e| e.to_string())?;
    let out_tokens = tokens(&out);
    let dev = max_abs_diff(out_tokens.data(), reference.data());
    if dev > 1e-6 {
        return Err(format!("zero-bias caca deviates from Eq.5 attention by {dev:.2e}"));
    }

    // sigma = 0.01: attention mass off-column must vanish
    let q = Tensor::randn(&[1, n, c], &mut rng);
    let k = Tensor::randn(&[1, n, c], &mut rng);
    let bias = column_bias(h, w, 0.01).map_err(|e| e.to_string())?;
    let logits = q
        .bmm_nt(&k)
        .unwrap()
        .scale(1.0 / (c as f32).sqrt())
        .add_bias_nm(&bias)
        .unwrap();
    let weights_sm = logits.softmax(2).unwrap();
    let mut worst_mass = 0.0f64;
    for i in 0..n {
        let mut cross = 0.0f64;
        for j in 0..n {
            if i % w != j % w {
                cross += weights_sm.data()[i * n + j] as f64;
            }
        }
        worst_mass = worst_mass.max(cross);
    }
    if worst_mass > 1e-6 {
        return Err(format!("cross-column mass {worst_mass:.2e} at sigma=0.01"));
    }
    Ok(format!("degeneracy {dev:.2e}, cross-column mass {worst_mass:.2e}"))
}

// -- criterion 5 -------------------------------------------------------------

fn zero_conv_gate() -> Result<String, String> {
    let mut rng = Rng::new(1005);
    let mut store = ParamStore::new();
    let weights = AttentionWeights::new(&mut store, "inj", 8, 2, &mut rng);
    let gate = ZeroConv::new(&mut store, "gate", 8);
    let f_caca = Tensor::randn(&[2, 8, 4, 4], &mut rng);
    let tokens = Tensor::randn(&[2, 32, 8], &mut rng);
    let out = inject_3d(&store, &weights, &gate, &f_caca, &tokens).map_err(|e| e.to_string())?;
    if !bits_equal(&out, &f_caca) {
        return Err("inject_3d is not a bitwise no-op at initialization".into());
    }

    let target = Tensor::randn(&[2, 8, 4, 4], &mut rng);
    let loss = out.mse(&target).map_err(|e| e.to_string())?;
    loss.backward().map_err(|e| e.to_string())?;
    let grads = store.take_grads_zero_filled();
    let mut state = OptimizerState::new(&store);
    optimizer_step(&AdamW::new(1e-2), &mut store, &grads, &mut state).map_err(|e| e.to_string())?;
    if gate.is_zero(&store) {
        return Err("gate weights stayed zero after a training step".into());
    }
    Ok("no-op at init, gate learns after one step".into())
}

// -- criterion 6 -------------------------------------------------------------

fn forward_process() -> Result<String, String> {
    let cfg = RunConfig::default();
    let sched = NoiseSchedule::linear(1000, cfg.beta_start, cfg.beta_end).map_err(|e| e.to_string())?;
    if sched.betas[0] != 8.5e-4 || sched.betas[999] != 0.012 {
        return Err(format!(
            "schedule endpoints ({}, {}) differ from (8.5e-4, 0.012)",
            sched.betas[0], sched.betas[999]
        ));
    }
    for t in 1..sched.len() {
        if sched.alpha_bars[t] >= sched.alpha_bars[t - 1] {
            return Err(format!("alpha_bar not strictly decreasing at {t}"));
        }
    }
    let mut rng = Rng::new(1006);
    let z0 = Tensor::randn(&[6, 6], &mut rng);
    let eps = Tensor::randn(&[6, 6], &mut rng);
    let zt = q_sample(&z0, 0, &eps, &sched).map_err(|e| e.to_string())?;
    if !bits_equal(&zt, &z0) {
        return Err("q_sample at alpha_bar = 1 is not the identity".into());
    }
    let nearly_one = NoiseSchedule::linear(1, 0.9999999, 0.9999999).map_err(|e| e.to_string())?;
    let zt = q_sample(&z0, 1, &eps, &nearly_one).map_err(|e| e.to_string())?;
    let dev = max_abs_diff(zt.data(), eps.data());
    if dev > 1e-3 {
        return Err(format!("alpha_bar -> 0 limit deviates from eps by {dev:.2e}"));
    }
    let quarter = NoiseSchedule::linear(1, 0.75, 0.75).map_err(|e| e.to_string())?;
    let one = Tensor::ones(&[1]);
    let z = q_sample(&one, 1, &one, &quarter).map_err(|e| e.to_string())?;
    if (z.data()[0] - 1.36603).abs() > 1e-5 {
        return Err(format!("hand value {} != 1.36603", z.data()[0]));
    }
    Ok(format!("endpoints exact, hand value {}", z.data()[0]))
}

// -- criterion 7 -------------------------------------------------------------

fn gradient_suite() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = Rng::new(1007);
    let mut worst_primitive = 0.0f32;
    let randv = |n: usize, rng: &mut Rng| -> Vec<f32> {
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
    };

    for trial in 0..5 {
        let b = 1 + trial % 2;
        let (ci, co) = (2 + trial % 3, 3 + trial % 2);
        let hw = 5 + trial; // odd/even mix
        let weighted = |out: Tensor, w: &[f32]| -> Tensor {
            let wt = Tensor::from_vec(out.shape(), w.to_vec()).unwrap();
            out.mul(&wt).unwrap().sum_all().unwrap()
        };

        // elementwise add/mul/scale + silu chain
        let n = b * ci * hw;
        let (xv, yv, wv) = (randv(n, &mut rng), randv(n, &mut rng), randv(n, &mut rng));
        let shape: Vec<usize> = vec![b, ci, hw];
        let e = check_gradients(&[(&shape, xv), (&shape, yv)], 1e-3, |ts| {
            let y = ts[0].mul(&ts[1]).unwrap().silu().add(&ts[0].scale(0.3)).unwrap();
            weighted(y, &wv)
        });
        worst_primitive = worst_primitive.max(e);

        // matmul
        let (m, k2, n2) = (2 + trial, 3 + trial, 2 + (trial + 1) % 3);
        let a = randv(m * k2, &mut rng);
        let bb = randv(k2 * n2, &mut rng);
        let w = randv(m * n2, &mut rng);
        let e = check_gradients(&[(&[m, k2], a), (&[k2, n2], bb)], 1e-3, |ts| {
            weighted(ts[0].matmul(&ts[1]).unwrap(), &w)
        });
        worst_primitive = worst_primitive.max(e);

        // batched matmul, both orientations
        let a = randv(2 * 3 * 4, &mut rng);
        let bb = randv(2 * 4 * 3, &mut rng);
        let w = randv(2 * 3 * 3, &mut rng);
        let e = check_gradients(&[(&[2, 3, 4], a.clone()), (&[2, 4, 3], bb.clone())], 1e-3, |ts| {
            weighted(ts[0].bmm(&ts[1]).unwrap(), &w)
        });
        worst_primitive = worst_primitive.max(e);
        let bt = randv(2 * 5 * 4, &mut rng);
        let w = randv(2 * 3 * 5, &mut rng);
        let e = check_gradients(&[(&[2, 3, 4], a), (&[2, 5, 4], bt)], 1e-3, |ts| {
            weighted(ts[0].bmm_nt(&ts[1]).unwrap(), &w)
        });
        worst_primitive = worst_primitive.max(e);

        // conv2d over stride/pad variants and conv3d
        for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0)] {
            let x = randv(b * ci * hw * hw, &mut rng);
            let kn = randv(co * ci * 9, &mut rng);
            let bias = randv(co, &mut rng);
            let oh = (hw + 2 * pad - 3) / stride + 1;
            let w = randv(b * co * oh * oh, &mut rng);
            let e = check_gradients(
                &[(&[b, ci, hw, hw], x), (&[co, ci, 3, 3], kn), (&[co], bias)],
                1e-3,
                |ts| weighted(ts[0].conv2d(&ts[1], Some(&ts[2]), stride, pad).unwrap(), &w),
            );
            worst_primitive = worst_primitive.max(e);
        }
        let x = randv(b * 2 * 64, &mut rng);
        let kn = randv(3 * 2 * 27, &mut rng);
        let bias = randv(3, &mut rng);
        let w = randv(b * 3 * 64, &mut rng);
        let e = check_gradients(
            &[(&[b, 2, 4, 4, 4], x), (&[3, 2, 3, 3, 3], kn), (&[3], bias)],
            1e-3,
            |ts| weighted(ts[0].conv3d(&ts[1], Some(&ts[2]), 1).unwrap(), &w),
        );
        worst_primitive = worst_primitive.max(e);

        // softmax / group_norm / film
        let x = randv(4 * (5 + trial), &mut rng);
        let w = randv(4 * (5 + trial), &mut rng);
        let e = check_gradients(&[(&[4, 5 + trial], x)], 1e-3, |ts| {
            weighted(ts[0].softmax(1).unwrap(), &w)
        });
        worst_primitive = worst_primitive.max(e);
        let x = randv(2 * 4 * 9, &mut rng);
        let gamma = randv(4, &mut rng);
        let beta = randv(4, &mut rng);
        let w = randv(72, &mut rng);
        let e = check_gradients(&[(&[2, 4, 3, 3], x), (&[4], gamma), (&[4], beta)], 1e-3, |ts| {
            weighted(ts[0].group_norm(2, &ts[1], &ts[2], 1e-5).unwrap(), &w)
        });
        worst_primitive = worst_primitive.max(e);
        let x = randv(2 * 3 * 4, &mut rng);
        let s = randv(6, &mut rng);
        let t = randv(6, &mut rng);
        let w = randv(24, &mut rng);
        let e = check_gradients(&[(&[2, 3, 4], x), (&[2, 3], s), (&[2, 3], t)], 1e-3, |ts| {
            weighted(ts[0].film(&ts[1], &ts[2]).unwrap(), &w)
        });
        worst_primitive = worst_primitive.max(e);

        // structural ops, upsample/pool, linear, losses, logit bias
        let a = randv(2 * 3 * 4, &mut rng);
        let bb = randv(2 * 2 * 4, &mut rng);
        let w = randv(2 * 5 * 4, &mut rng);
        let e = check_gradients(&[(&[2, 3, 4], a), (&[2, 2, 4], bb)], 1e-3, |ts| {
            let y = concat(&[&ts[0], &ts[1]], 1).unwrap();
            let y = y.permute(&[1, 0, 2]).unwrap().reshape(&[5, 8]).unwrap();
            let wt = Tensor::from_vec(&[5, 8], w.clone()).unwrap();
            y.mul(&wt).unwrap().sum_all().unwrap()
        });
        worst_primitive = worst_primitive.max(e);
        let x = randv(b * 2 * 16, &mut rng);
        let w = randv(b * 2 * 64, &mut rng);
        let e = check_gradients(&[(&[b, 2, 4, 4], x)], 1e-3, |ts| {
            weighted(ts[0].upsample_nearest2x().unwrap(), &w)
        });
        worst_primitive = worst_primitive.max(e);
        let x = randv(b * 2 * 64, &mut rng);
        let w = randv(b * 2 * 8, &mut rng);
        let e = check_gradients(&[(&[b, 2, 4, 4, 4], x)], 1e-3, |ts| {
            weighted(ts[0].avg_pool3d(2, 2, 2).unwrap(), &w)
        });
        worst_primitive = worst_primitive.max(e);
        let x = randv(5 * 3, &mut rng);
        let wm = randv(3 * 4, &mut rng);
        let bias = randv(4, &mut rng);
        let w = randv(5 * 4, &mut rng);
        let e = check_gradients(&[(&[5, 3], x), (&[3, 4], wm), (&[4], bias)], 1e-3, |ts| {
            weighted(ts[0].linear(&ts[1], Some(&ts[2])).unwrap(), &w)
        });
        worst_primitive = worst_primitive.max(e);
        let p = randv(16, &mut rng);
        let q = randv(16, &mut rng);
        let e = check_gradients(&[(&[4, 4], p), (&[4, 4], q)], 1e-3, |ts| {
            ts[0].mse(&ts[1]).unwrap()
        });
        worst_primitive = worst_primitive.max(e);
        let x = randv(2 * 3 * 4, &mut rng);
        let bias = randv(12, &mut rng);
        let w = randv(24, &mut rng);
        let e = check_gradients(&[(&[2, 3, 4], x), (&[3, 4], bias)], 1e-3, |ts| {
            weighted(ts[0].add_bias_nm(&ts[1]).unwrap(), &w)
        });
        worst_primitive = worst_primitive.max(e);
    }
    if worst_primitive >= 1e-3 {
        return Err(format!("primitive gradient error {worst_primitive:.2e} >= 1e-3"));
    }

    // full tiny-UNet loss against finite differences on sampled parameters
    let cfg = UNetConfig {
        image_size: 8,
        in_channels: 1,
        base_channels: 8,
        ch_mult: vec![1, 2],
        attn_levels: vec![0, 1],
        groups: 4,
        heads: 2,
        sigma: 5.0,
        emb_dim: 8,
        refine_hidden: 4,
        caca_enabled: true,
        im3d_enabled: true,
    };
    let unet = UNet::new(cfg.clone(), &mut Rng::new(77)).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(1070);
    let z_t = Tensor::randn(&[2, 1, 8, 8], &mut rng);
    let z_ref = Tensor::randn(&[2, 1, 8, 8], &mut rng);
    let vol = Tensor::randn(&[2, 2, 8, 8, 8], &mut rng);
    let target = Tensor::randn(&[2, 1, 8, 8], &mut rng);
    let ts = vec![3usize, 9];
    let conds = vec![Condition::Dir(Direction::Cc2Mlo), Condition::Dir(Direction::Mlo2Cc)];

    let loss = unet
        .forward(&z_t, &ts, &conds, &z_ref, Some(&vol))
        .and_then(|o| o.mse(&target))
        .map_err(|e| e.to_string())?;
    loss.backward().map_err(|e| e.to_string())?;

    let n_params = unet.store.len();
    let mut checked = 0;
    let mut worst_model = 0.0f32;
    for pick in 0..20 {
        let idx = (pick * 6151 + 13) % n_params;
        let t = unet.store.at(idx);
        let Some(grad) = t.grad() else { continue };
        let coord = (pick * 257) % t.numel();
        let analytic = grad[coord];
        let orig = t.data().to_vec();
        let h = 2e-2f32;
        let eval = |v: f32| -> f32 {
            let mut probe = UNet::new(cfg.clone(), &mut Rng::new(77)).unwrap();
            for i in 0..n_params {
                probe.store.replace(i, unet.store.at(i).to_vec());
            }
            let mut data = orig.clone();
            data[coord] = v;
            probe.store.replace(idx, data);
            probe
                .forward(&z_t, &ts, &conds, &z_ref, Some(&vol))
                .unwrap()
                .mse(&target)
                .unwrap()
                .item()
        };
        let fd = (eval(orig[coord] + h) - eval(orig[coord] - h)) / (2.0 * h);
        worst_model = worst_model.max(rel_err(analytic, fd, 1e-2));
        checked += 1;
    }
    if checked < 20 {
        return Err(format!("only {checked} parameters carried gradients"));
    }
    if worst_model >= 5e-3 {
        return Err(format!("tiny-UNet gradient error {worst_model:.2e} >= 5e-3"));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 120.0 {
        return Err(format!("runtime {secs:.1}s exceeds 2 minutes"));
    }
    Ok(format!(
        "primitives {worst_primitive:.1e}, tiny UNet {worst_model:.1e} over {checked} params"
    ))
}

// -- criterion 8 -------------------------------------------------------------

fn cfg_identities() -> Result<String, String> {
    let mut rng = Rng::new(1008);
    let c = Tensor::randn(&[4, 4], &mut rng);
    let u = Tensor::randn(&[4, 4], &mut rng);
    let s1 = cfg_combine(&c, &u, 1.0).map_err(|e| e.to_string())?;
    let s0 = cfg_combine(&c, &u, 0.0).map_err(|e| e.to_string())?;
    if !bits_equal(&s1, &c) || !bits_equal(&s0, &u) {
        return Err("cfg_combine endpoints are not exact".into());
    }

    // scale-1 sampling equals a conditional-only run through a real model
    let cfg = UNetConfig {
        image_size: 8,
        in_channels: 1,
        base_channels: 8,
        ch_mult: vec![1, 2],
        attn_levels: vec![1],
        groups: 4,
        heads: 2,
        sigma: 5.0,
        emb_dim: 8,
        refine_hidden: 4,
        caca_enabled: true,
        im3d_enabled: true,
    };
    let unet = UNet::new(cfg, &mut Rng::new(88)).map_err(|e| e.to_string())?;
    let sched = NoiseSchedule::linear(20, 1e-3, 0.02).map_err(|e| e.to_string())?;
    let x_ref = Tensor::from_vec(&[8, 8], (0..64).map(|i| i as f32 / 64.0).collect())
        .map_err(|e| e.to_string())?;
    let mut with_cfg = SampleOptions::new(10, 1.0, 5);
    with_cfg.conditional_only = false;
    let mut cond_only = with_cfg;
    cond_only.conditional_only = true;
    let a = sample(&unet, &x_ref, Direction::Cc2Mlo, &sched, &with_cfg).map_err(|e| e.to_string())?;
    let b = sample(&unet, &x_ref, Direction::Cc2Mlo, &sched, &cond_only).map_err(|e| e.to_string())?;
    let dev = max_abs_diff(a.data(), b.data());
    if dev > 1e-5 {
        return Err(format!("scale-1 sampling deviates from conditional-only by {dev:.2e}"));
    }
    Ok(format!("endpoints exact, sampler dev {dev:.2e}"))
}

// -- criterion 9 -------------------------------------------------------------

fn determinism() -> Result<String, String> {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = root.path();
    let cfg_path = root.join("tiny.conf");
    std::fs::write(
        &cfg_path,
        "base_channels = 8\ngroups = 4\nheads = 2\nbatch = 4\nt_steps = 50\nimage_size = 16\nemb_dim = 16\nseed = 3\n",
    )
    .map_err(|e| e.to_string())?;

    let mut digests = Vec::new();
    for run in 0..2 {
        let dir = root.join(format!("run{run}"));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let ds = dir.join("ds");
        cli(&["gen-data", "--out", ds.to_str().unwrap(), "--count", "12", "--size", "16", "--seed", "9"])?;
        let ckpt = dir.join("model.ca3d");
        cli(&[
            "train",
            "--data",
            ds.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--steps",
            "20",
        ])?;
        let input = ds.join("pair_00011.ca3d");
        let out_img = dir.join("translated");
        cli(&[
            "translate",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--direction",
            "cc2mlo",
            "--steps",
            "10",
            "--seed",
            "4",
            "--out",
            out_img.to_str().unwrap(),
        ])?;
        let report = dir.join("report.tsv");
        cli(&[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            ds.to_str().unwrap(),
            "--split",
            "test",
            "--steps",
            "10",
            "--out",
            report.to_str().unwrap(),
        ])?;

        // the training log carries wallclock columns; everything else must
        // be byte-identical across runs
        let mut digest = Vec::new();
        digest.push(sha256_dir(&ds)?);
        digest.push(sha256_file(&ckpt)?);
        digest.push(sha256_file(&out_img.with_extension("pgm"))?);
        digest.push(sha256_file(&out_img.with_extension("ca3d"))?);
        digest.push(sha256_file(&report)?);
        digests.push(digest);
    }
    for (i, (a, b)) in digests[0].iter().zip(&digests[1]).enumerate() {
        if a != b {
            let what = ["gen-data", "train", "translate(pgm)", "translate(bin)", "eval"][i];
            return Err(format!("{what} output differs between identical runs"));
        }
    }
    Ok("gen-data, train, translate, eval byte-identical across reruns".into())
}

// -- criteria 10 and 11 ------------------------------------------------------

struct TrainEval {
    step0_loss: f32,
    final_loss: f32,
    mean_psnr_cc2mlo: f32,
}

#[allow(clippy::too_many_arguments)]
fn train_and_eval(
    root: &Path,
    tag: &str,
    data: &Path,
    config: &str,
    steps: usize,
    eval_steps: usize,
    no_caca: bool,
    no_im3d: bool,
) -> Result<TrainEval, String> {
    let cfg_path = root.join(format!("{tag}.conf"));
    std::fs::write(&cfg_path, config).map_err(|e| e.to_string())?;
    let ckpt = root.join(format!("{tag}.ca3d"));
    let mut args = vec![
        "train".to_string(),
        "--data".into(),
        data.to_str().unwrap().into(),
        "--config".into(),
        cfg_path.to_str().unwrap().into(),
        "--out".into(),
        ckpt.to_str().unwrap().into(),
        "--steps".into(),
        steps.to_string(),
    ];
    if no_caca {
        args.push("--no-caca".into());
    }
    if no_im3d {
        args.push("--no-im3d".into());
    }
    let arg_refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    cli(&arg_refs)?;

    let log = std::fs::read_to_string(ckpt.with_extension("log")).map_err(|e| e.to_string())?;
    let losses: Vec<(usize, f32)> = log
        .lines()
        .filter_map(|l| {
            let mut parts = l.split('\t');
            Some((parts.next()?.parse().ok()?, parts.next()?.parse().ok()?))
        })
        .collect();
    let step0_loss = losses.first().ok_or("empty training log")?.1;
    let final_loss = losses.last().ok_or("empty training log")?.1;

    let report_path = root.join(format!("{tag}.tsv"));
    cli(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "test",
        "--steps",
        &eval_steps.to_string(),
        "--out",
        report_path.to_str().unwrap(),
    ])?;
    let report = std::fs::read_to_string(&report_path).map_err(|e| e.to_string())?;
    let mean_psnr_cc2mlo = report
        .lines()
        .find(|l| l.starts_with("MEAN"))
        .and_then(|l| l.split('\t').nth(1))
        .and_then(|v| v.parse().ok())
        .ok_or("report missing MEAN line")?;
    Ok(TrainEval {
        step0_loss,
        final_loss,
        mean_psnr_cc2mlo,
    })
}

/// PSNR of simply presenting the reference as the prediction.
fn copy_baseline_psnr(data: &Path) -> Result<f32, String> {
    let pairs = load_split(data, Split::Test).map_err(|e| e.to_string())?;
    let mut rep = MetricReport::default();
    for p in &pairs {
        rep.push(
            format!("copy/{}", p.id),
            psnr(&p.cc, &p.mlo).map_err(|e| e.to_string())?,
            ssim_default(&p.cc, &p.mlo).map_err(|e| e.to_string())?,
        );
    }
    Ok(rep.mean_psnr())
}

fn training_smoke(root: &Path) -> Result<String, String> {
    let start = Instant::now();
    let data = root.join("smoke_ds");
    cli(&["gen-data", "--out", data.to_str().unwrap(), "--count", "500", "--size", "32", "--seed", "20"])?;
    // T = 200, 2000 steps as stated; batch/width sized for a 2-core desk run
    let config = "t_steps = 200\nbase_channels = 12\ngroups = 4\nbatch = 8\nseed = 1\n";
    let r = train_and_eval(root, "smoke", &data, config, 2000, 50, false, false)?;
    let baseline = copy_baseline_psnr(&data)?;
    let secs = start.elapsed().as_secs_f64();
    if r.final_loss >= 0.5 * r.step0_loss {
        return Err(format!(
            "loss {} after 2000 steps is not below half of step-0 loss {}",
            r.final_loss, r.step0_loss
        ));
    }
    if r.mean_psnr_cc2mlo <= baseline {
        return Err(format!(
            "CC->MLO PSNR {:.3} does not beat copy-the-reference baseline {:.3}",
            r.mean_psnr_cc2mlo, baseline
        ));
    }
    if secs >= 3600.0 {
        return Err(format!("runtime {:.0}s exceeds 60 minutes", secs));
    }
    Ok(format!(
        "loss {:.3} -> {:.3}, PSNR {:.2} > copy baseline {:.2} ({:.0}s)",
        r.step0_loss, r.final_loss, r.mean_psnr_cc2mlo, baseline, secs
    ))
}

fn ablation_ordering(root: &Path) -> Result<String, String> {
    let data = root.join("ablate_ds");
    cli(&["gen-data", "--out", data.to_str().unwrap(), "--count", "120", "--size", "32", "--seed", "30"])?;
    let seeds = [1u64, 2, 3];
    let steps = 350;
    let eval_steps = 25;
    let mut table = String::new();
    // psnr[seed][config]: full, caca-only, im3d-only, baseline
    let mut psnr = [[0.0f32; 4]; 3];
    for (si, seed) in seeds.iter().enumerate() {
        for (ci, (tag, no_caca, no_im3d)) in [
            ("full", false, false),
            ("caca_only", false, true),
            ("im3d_only", true, false),
            ("baseline", true, true),
        ]
        .iter()
        .enumerate()
        {
            let config = format!("base_channels = 8\ngroups = 4\nbatch = 8\nseed = {seed}\n");
            let r = train_and_eval(
                root,
                &format!("ab_{tag}_s{seed}"),
                &data,
                &config,
                steps,
                eval_steps,
                *no_caca,
                *no_im3d,
            )?;
            psnr[si][ci] = r.mean_psnr_cc2mlo;
            table.push_str(&format!("seed {seed} {tag}: {:.3}\n", r.mean_psnr_cc2mlo));
        }
    }
    let wins = |better: usize, worse: usize| -> usize {
        (0..3).filter(|&s| psnr[s][better] >= psnr[s][worse]).count()
    };
    let checks = [
        ("full >= caca-only", wins(0, 1)),
        ("full >= im3d-only", wins(0, 2)),
        ("caca-only >= baseline", wins(1, 3)),
        ("im3d-only >= baseline", wins(2, 3)),
    ];
    for (name, w) in &checks {
        if *w < 2 {
            return Err(format!("{name} holds in only {w}/3 seeds\n{table}"));
        }
    }
    Ok(format!(
        "orderings hold ({} seeds each): {}",
        checks.iter().map(|(_, w)| w.to_string()).collect::<Vec<_>>().join("/"),
        table.replace('\n', "; ")
    ))
}

// -- criterion 12 ------------------------------------------------------------

fn metrics_sanity() -> Result<String, String> {
    let mut rng = Rng::new(1012);
    let a = Tensor::randn(&[16, 16], &mut rng).scale(0.2).add_scalar(0.5);
    if psnr(&a, &a).map_err(|e| e.to_string())? != 99.0 {
        return Err("identity PSNR is not the 99 dB cap".into());
    }
    let zeros = Tensor::zeros(&[10, 10]);
    let tenth = Tensor::full(&[10, 10], 0.1);
    let p = psnr(&zeros, &tenth).map_err(|e| e.to_string())?;
    if (p - 20.0).abs() > 1e-4 {
        return Err(format!("MSE 0.01 gives {p} dB, want 20"));
    }
    let ones = Tensor::full(&[10, 10], 1.0);
    let p0 = psnr(&zeros, &ones).map_err(|e| e.to_string())?;
    if p0.abs() > 1e-6 {
        return Err(format!("MSE 1 gives {p0} dB, want 0"));
    }
    if ssim_default(&a, &a).map_err(|e| e.to_string())? != 1.0 {
        return Err("identity SSIM is not exactly 1.0".into());
    }
    let b = Tensor::randn(&[16, 16], &mut rng).scale(0.2).add_scalar(0.5);
    let ab = ssim_default(&a, &b).map_err(|e| e.to_string())?;
    let ba = ssim_default(&b, &a).map_err(|e| e.to_string())?;
    if (ab - ba).abs() > 1e-7 {
        return Err(format!("SSIM asymmetry {ab} vs {ba}"));
    }
    let c1 = Tensor::full(&[12, 12], 0.5);
    let c2 = Tensor::full(&[12, 12], 0.5);
    if ssim_default(&c1, &c2).map_err(|e| e.to_string())? != 1.0 {
        return Err("constant-pair SSIM is not 1.0".into());
    }
    Ok(format!("identity/caps exact, symmetry {:.1e}", (ab - ba).abs()))
}

// -- harness -----------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let heavy_root = tempfile::tempdir().expect("tempdir");
    let heavy_root = heavy_root.path().to_path_buf();

    let mut outcomes = Vec::new();
    run_criterion(&mut outcomes, "1. geometry point oracle", geometry_point_oracle);
    run_criterion(&mut outcomes, "2. back-projection round trip + adjoint", back_projection_round_trip);
    run_criterion(&mut outcomes, "3. column bias closed form", column_bias_closed_form);
    run_criterion(&mut outcomes, "4. CACA degeneracy", caca_degeneracy);
    run_criterion(&mut outcomes, "5. zero-conv gate", zero_conv_gate);
    run_criterion(&mut outcomes, "6. forward process", forward_process);
    run_criterion(&mut outcomes, "7. gradient suite", gradient_suite);
    run_criterion(&mut outcomes, "8. CFG identities", cfg_identities);
    run_criterion(&mut outcomes, "12. metrics sanity", metrics_sanity);
    run_criterion(&mut outcomes, "9. command determinism", determinism);
    {
        let root = heavy_root.clone();
        run_criterion(&mut outcomes, "10. desk-scale training smoke", move || {
            training_smoke(&root)
        });
    }
    {
        let root = heavy_root.clone();
        run_criterion(&mut outcomes, "11. ablation ordering", move || {
            ablation_ordering(&root)
        });
    }

    println!("\n==== acceptance summary ====");
    let mut failed = 0;
    for o in &outcomes {
        let status = if o.result.is_ok() { "PASS" } else { "FAIL" };
        println!("{status}  {:<42} {:>8.1}s", o.name, o.secs);
        if o.result.is_err() {
            failed += 1;
        }
    }
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
