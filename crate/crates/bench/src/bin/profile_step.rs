//! Coarse wall-clock breakdown of one training step's building blocks.
//! Run with `cargo run --release -p ca3d-bench --bin profile-step`.

use std::time::Instant;

use ca3d_core::diffusion::{training_loss, ConditioningOptions, Condition, NoiseSchedule};
use ca3d_core::data::ViewPair;
use ca3d_core::optim::{optimizer_step, AdamW, OptimizerState};
use ca3d_core::unet::{UNet, UNetConfig};
use ca3d_core::{Rng, Tensor};

fn time<R>(label: &str, mut f: impl FnMut() -> R) -> R {
    let start = Instant::now();
    let out = f();
    println!("{label:<32} {:8.1} ms", start.elapsed().as_secs_f64() * 1e3);
    out
}

fn main() {
    let mut rng = Rng::new(0);
    let cfg = UNetConfig {
        image_size: 32,
        in_channels: 1,
        base_channels: 16,
        ch_mult: vec![1, 2, 4],
        attn_levels: vec![1, 2],
        groups: 8,
        heads: 4,
        sigma: 5.0,
        emb_dim: 64,
        refine_hidden: 8,
        caca_enabled: true,
        im3d_enabled: true,
    };
    let model = UNet::new(cfg, &mut rng).unwrap();
    let b = 16;

    let z_t = Tensor::randn(&[b, 1, 32, 32], &mut rng);
    let z_ref = Tensor::randn(&[b, 1, 32, 32], &mut rng);
    let vol = Tensor::randn(&[b, 2, 32, 32, 32], &mut rng);
    let ts: Vec<usize> = (1..=b).map(|i| i * 10).collect();
    let conds = vec![Condition::Null; b];

    // raw kernels at model sizes
    let x = Tensor::randn(&[b, 16, 32, 32], &mut rng);
    let w = Tensor::randn(&[16, 16, 3, 3], &mut rng);
    time("conv2d 16->16 @32^2 fwd", || x.conv2d(&w, None, 1, 1).unwrap());
    let x2 = Tensor::randn(&[b, 64, 8, 8], &mut rng);
    let w2 = Tensor::randn(&[64, 64, 3, 3], &mut rng);
    time("conv2d 64->64 @8^2 fwd", || x2.conv2d(&w2, None, 1, 1).unwrap());
    let xv = Tensor::randn(&[b, 8, 16, 16, 16], &mut rng);
    let wv = Tensor::randn(&[32, 8, 3, 3, 3], &mut rng);
    time("conv3d 8->32 @16^3 fwd", || xv.conv3d(&wv, None, 1).unwrap());
    let q = Tensor::randn(&[b * 4, 256, 8], &mut rng);
    let k = Tensor::randn(&[b * 4, 1024, 8], &mut rng);
    time("bmm_nt 256x1024x8 (inject)", || q.bmm_nt(&k).unwrap());
    let big = Tensor::randn(&[b, 16, 32, 32], &mut rng);
    time("silu @ [16,16,32,32]", || big.silu());
    let gamma = Tensor::ones(&[16]);
    let beta = Tensor::zeros(&[16]);
    time("group_norm @ [16,16,32,32]", || {
        big.group_norm(8, &gamma, &beta, 1e-5).unwrap()
    });

    // attention blocks at level-1 sizes
    {
        use ca3d_core::attention::{caca, column_bias, inject_3d, AttentionWeights, ZeroConv};
        use ca3d_core::params::ParamStore;
        let mut store = ParamStore::new();
        let w_caca = AttentionWeights::new(&mut store, "c", 32, 4, &mut rng);
        let w_inj = AttentionWeights::new(&mut store, "i", 32, 4, &mut rng);
        let gate = ZeroConv::new(&mut store, "z", 32);
        let f_tar = Tensor::randn(&[b, 32, 16, 16], &mut rng);
        let f_ref = Tensor::randn(&[b, 32, 16, 16], &mut rng);
        let bias = column_bias(16, 16, 5.0).unwrap();
        let tokens = Tensor::randn(&[b, 1024, 32], &mut rng);
        let out = time("caca L1 fwd", || caca(&store, &w_caca, &f_tar, &f_ref, Some(&bias)).unwrap());
        let tgt = Tensor::randn(&[b, 32, 16, 16], &mut rng);
        time("caca L1 bwd", || {
            out.mse(&tgt).unwrap().backward().unwrap();
            store.take_grads();
        });
        let out = time("inject L1 fwd", || inject_3d(&store, &w_inj, &gate, &f_tar, &tokens).unwrap());
        time("inject L1 bwd", || {
            out.mse(&tgt).unwrap().backward().unwrap();
            store.take_grads();
        });
    }

    // component breakdown via config ablations
    let mut cfg_convs = model.cfg.clone();
    cfg_convs.attn_levels = vec![];
    let conv_model = UNet::new(cfg_convs, &mut Rng::new(0)).unwrap();
    let out = time("fwd convs only", || {
        conv_model.forward(&z_t, &ts, &conds, &z_ref, None).unwrap()
    });
    let target = Tensor::randn(&[b, 1, 32, 32], &mut rng);
    time("bwd convs only", || {
        out.mse(&target).unwrap().backward().unwrap()
    });
    let mut cfg_attn = model.cfg.clone();
    cfg_attn.im3d_enabled = false;
    let attn_model = UNet::new(cfg_attn, &mut Rng::new(0)).unwrap();
    let out = time("fwd convs+caca", || {
        attn_model.forward(&z_t, &ts, &conds, &z_ref, None).unwrap()
    });
    time("bwd convs+caca", || {
        out.mse(&target).unwrap().backward().unwrap()
    });

    // full model
    let out = time("unet forward (batch 16)", || {
        model.forward(&z_t, &ts, &conds, &z_ref, Some(&vol)).unwrap()
    });
    let loss = out.mse(&target).unwrap();
    time("backward", || loss.backward().unwrap());

    // end-to-end training step including batch assembly
    let pairs: Vec<ViewPair> = (0..32u64)
        .map(|id| ViewPair {
            cc: Tensor::from_vec(&[32, 32], rng.normal_vec(1024)).unwrap(),
            mlo: Tensor::from_vec(&[32, 32], rng.normal_vec(1024)).unwrap(),
            id,
            seed: id,
        })
        .collect();
    let sched = NoiseSchedule::linear(200, 8.5e-4, 0.012).unwrap();
    let mut model = model;
    let opt = AdamW::new(1e-4);
    let mut state = OptimizerState::new(&model.store);
    for i in 0..3 {
        time(&format!("full training step {i}"), || {
            let batch: Vec<ViewPair> = (0..16).map(|j| pairs[(i * 16 + j) % 32].clone()).collect();
            let loss = training_loss(
                &model,
                &batch,
                &sched,
                0.1,
                ConditioningOptions::default(),
                &mut rng,
            )
            .unwrap();
            loss.backward().unwrap();
            let grads = model.store.take_grads_zero_filled();
            optimizer_step(&opt, &mut model.store, &grads, &mut state).unwrap();
        });
    }
}
