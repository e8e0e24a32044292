//! Analytic prompt gradients against central finite differences in f64.

use apl_core::apl::{loss_id, loss_reg};
use apl_core::diffusion::{gaussian, DiffusionModel, ModelConfig};
use apl_core::image::PIXELS;
use apl_core::seed;
use apl_core::synthworld::{build_reg_dataset, TripletSample, World, WorldConfig};
use apl_core::textenc::Vocabulary;

fn setup() -> (DiffusionModel<f64>, World) {
    let world = World::generate(&WorldConfig::default()).unwrap();
    let vocab = Vocabulary::build(world.schema(), 90, 16).unwrap();
    let mut model = DiffusionModel::<f64>::new(ModelConfig::default(), vocab, 21).unwrap();
    let mut rng = seed::rng(1, "head", &[]);
    let n = model.denoiser.head.weight.len();
    model.denoiser.head.weight.value = gaussian(n, &mut rng).iter().map(|v| *v as f64 * 0.3).collect();
    (model, world)
}

type LossFn = fn(&mut DiffusionModel<f64>, &TripletSample, &[f64], f64, usize, &[f64]) -> apl_core::Result<apl_core::apl::LossGrad<f64>>;

fn check(loss: LossFn, model: &mut DiffusionModel<f64>, sample: &TripletSample, alpha: f64, t: usize) -> f64 {
    let m = 3;
    let d = model.text_dim();
    let prefix: Vec<f64> = gaussian(m * d, &mut seed::rng(2, "prefix", &[])).iter().map(|v| *v as f64 * 0.5).collect();
    let eps: Vec<f64> = gaussian(PIXELS, &mut seed::rng(3, "eps", &[])).iter().map(|v| *v as f64).collect();
    let analytic = loss(model, sample, &prefix, alpha, t, &eps).unwrap().grad;
    let h = 1e-6;
    let mut p = prefix.clone();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..p.len() {
        p[i] = prefix[i] + h;
        let lp = loss(model, sample, &p, alpha, t, &eps).unwrap().loss;
        p[i] = prefix[i] - h;
        let lm = loss(model, sample, &p, alpha, t, &eps).unwrap().loss;
        p[i] = prefix[i];
        let fd = (lp - lm) / (2.0 * h);
        num += (fd - analytic[i]).powi(2);
        den += fd.powi(2);
    }
    assert!(den > 0.0, "gradient vanished");
    (num / den).sqrt()
}

#[test]
fn identity_loss_gradient() {
    let (mut model, world) = setup();
    let sample = world.build_id_dataset(&world.records(&[7]).unwrap(), 1, 4).unwrap().remove(0);
    let rel = check(loss_id, &mut model, &sample, 1.0, 90);
    assert!(rel <= 1e-4, "relative error {rel}");
}

#[test]
fn regularization_loss_gradient() {
    let (mut model, _) = setup();
    let sample = build_reg_dataset(1, 8).unwrap().remove(0);
    let rel = check(loss_reg, &mut model, &sample, 1.0, 40);
    assert!(rel <= 1e-4, "relative error {rel}");
}
