use wsnorm::data;
use wsnorm::model::{Arch, ModelSpec};
use wsnorm::norm::NormKind;
use wsnorm::reparam::ReparamKind;
use wsnorm::train::{train, TrainConfig};

fn main() {
    for (n_train, epochs, decay) in [(256usize, 4usize, vec![]), (256, 6, vec![5usize])] {
        let mut tr = data::synth_blobs_range(9009, 0, n_train, 10).unwrap();
        let mut va = data::synth_blobs_range(9009, n_train, 256, 10).unwrap();
        let m = tr.channel_moments().unwrap();
        tr.standardize(&m);
        va.standardize(&m);
        let configs: [(&str, NormKind, ReparamKind); 3] = [
            ("bcn+ws", NormKind::BcnLarge { groups: None }, ReparamKind::Ws),
            ("gn+ws", NormKind::gn(), ReparamKind::Ws),
            ("gn", NormKind::gn(), ReparamKind::None),
        ];
        for (tag, norm, reparam) in configs {
            let spec = ModelSpec::new(Arch::ConvNet4, norm, reparam);
            let mut errs = Vec::new();
            for seed in 41..44u64 {
                let cfg = TrainConfig {
                    lr: 0.05,
                    epochs,
                    decay_epochs: decay.clone(),
                    batch_size: 32,
                    seed,
                    ..TrainConfig::default()
                };
                let (_, history) = train(&spec, &tr, Some(&va), &cfg, None).unwrap();
                errs.push(history.last().and_then(|h| h.val_err).unwrap());
            }
            println!("n={n_train} epochs={epochs} decay={decay:?} {tag:7} errs={errs:?}");
        }
    }
}
