use dann_core::gradcheck::check_gradients;
use dann_core::layers::Mode;
use dann_core::losses::{cell_loss_terms, domain_loss, total_loss, BatchLabels, LossConfig};
use dann_core::model::{DannConfig, DannModel, StemConfig};
use dann_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .map(|s| s.parse().expect("seed"))
        .collect();
    for seed in seeds {
        let cfg = DannConfig {
            patch_size: 32,
            stem: StemConfig {
                in_channels: 3,
                base_width: 2,
                blocks_per_stage: [1, 1, 1, 1],
            },
            cell_hidden: 4,
            domain_hidden: 4,
            grl: Default::default(),
            concat_intermediate: true,
        };
        let model = DannModel::<f64>::new(cfg, seed ^ 0xd4).unwrap();
        let mut mrng = ChaCha8Rng::seed_from_u64(seed ^ 0x99);
        let x = Tensor::param(
            vec![6, 3, 32, 32],
            (0..6 * 3 * 32 * 32).map(|_| mrng.random_range(0.05..0.95)).collect(),
        )
        .unwrap();
        let labels =
            BatchLabels::training(vec![1, 0, 1, 0, 1, 0], vec![0, 0, 0, 1, 1, 1]).unwrap();
        let loss_cfg = LossConfig::default();
        let mut leaves: Vec<Tensor<f64>> = model.parameters().into_iter().map(|(_, t)| t).collect();
        leaves.push(x.clone());
        let t0 = std::time::Instant::now();
        let err = check_gradients(&leaves, || {
            let out = model.forward(&x, Mode::Train, -1.0)?;
            let cell = cell_loss_terms(&out.p_c, &labels, &loss_cfg)?;
            let dom = domain_loss(&out.p_d, &labels.y_d, &loss_cfg)?;
            total_loss(&cell, &dom, &labels.y_d, &loss_cfg, None)
        })
        .unwrap();
        println!("seed {seed}: FULL max rel err {err:.3e} in {:?}", t0.elapsed());
    }
}
