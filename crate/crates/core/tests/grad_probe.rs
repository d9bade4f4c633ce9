use cascade_volcomp::denoiser::*;
use cascade_volcomp::diffusion::{make_linear_schedule, q_sample, training_loss};
use cascade_volcomp::nn::graph::Graph;

#[test]
#[ignore]
fn probe_truncation() {
    let cfg = AsmmConfig {
        in_dims: (8, 8, 8),
        base_channels: 4,
        channel_multipliers: [1, 2, 4, 4],
        age_embed_dim: 8,
        time_embed_dim: 8,
        attention_heads: 4,
    };
    let sched = make_linear_schedule(1e-4, 2e-2, 100).unwrap();
    let mut params = init_denoiser_params(&cfg, DenoiserVariant::Asmm, 5).unwrap();
    randomize_output_conv(&mut params, 6);
    let batch = make_gradcheck_batch(&cfg, &sched, 2, 7);

    let loss_of = |p: &cascade_volcomp::nn::ParamStore| -> f64 {
        let mut acc = 0.0;
        for item in &batch {
            let x_t = q_sample(&item.x0, item.t, &item.eps, &sched).unwrap();
            let eh = forward_eps(p, &cfg, DenoiserVariant::Asmm, &x_t, item.t, &item.guide, item.age_months).unwrap();
            acc += training_loss(&item.eps, &eh).unwrap();
        }
        acc / batch.len() as f64
    };

    // Analytic gradient for one specific weight that fails: replicate via backward.
    let mut g = Graph::new();
    let bind = params.bind(&mut g, true);
    let mut acc = None;
    for item in &batch {
        let x_t = q_sample(&item.x0, item.t, &item.eps, &sched).unwrap();
        let x_id = g.leaf(x_t, false);
        let g_id = g.leaf(item.guide.clone(), false);
        let eh = build_denoiser(&mut g, &bind, &cfg, DenoiserVariant::Asmm, x_id, g_id, item.t, item.age_months).unwrap();
        let e_id = g.leaf(item.eps.clone(), false);
        let l = g.mse_loss(eh, e_id);
        acc = Some(match acc { None => l, Some(p) => g.add(p, l) });
    }
    let loss = g.scale(acc.unwrap(), 1.0 / batch.len() as f64);
    let grads = g.backward(loss).unwrap();

    // Find worst weight across a sweep of names.
    let mut worst: (String, usize, f64, f64) = (String::new(), 0, 0.0, 0.0);
    let mut rng_names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    rng_names.truncate(200);
    for name in &rng_names {
        let t = params.get(name).unwrap().clone();
        let analytic_t = match grads.get(bind.id(name)) { Some(x) => x.clone(), None => continue };
        for idx in [0usize, t.len() / 3, 2 * t.len() / 3] {
            if idx >= t.len() { continue; }
            let an = analytic_t.as_slice().unwrap()[idx];
            let h = 1e-3;
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let denom = an.abs().max(fd.abs());
            if denom < 1e-10 { continue; }
            let rel = (an - fd).abs() / denom;
            if rel > worst.3 {
                worst = (name.clone(), idx, an, rel);
                eprintln!("worse: {name}[{idx}] an {an:.3e} fd {fd:.3e} rel {rel:.2e}");
            }
        }
    }
    // For the worst one, sweep h.
    let (name, idx, an, _) = worst;
    for h in [1e-2, 1e-3, 1e-4, 1e-5] {
        let mut plus = params.clone();
        plus.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] += h;
        let mut minus = params.clone();
        minus.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] -= h;
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        eprintln!("h={h:.0e}: fd {fd:.9e} analytic {an:.9e} rel {:.3e}", (an - fd).abs() / an.abs().max(fd.abs()));
    }
}
