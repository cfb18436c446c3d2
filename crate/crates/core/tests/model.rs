use leafnet::data::synth::{synth_dataset, SynthSpec};
use leafnet::model::{InputSpec, ModelGraph, Preset, TrainablePolicy};
use leafnet::tensor::Tensor;
use leafnet::train::{train, TrainConfig};

/// Weights of a bias-free bottleneck network with gamma/beta batch norms,
/// counted straight from the stage layout.
fn resnet50_oracle(in_channels: usize) -> usize {
    let conv = |i: usize, o: usize, k: usize| i * o * k * k;
    let bn = |c: usize| 2 * c;
    let mut total = conv(in_channels, 64, 7) + bn(64);
    let mut in_ch = 64;
    for (stage, (blocks, width)) in [(3, 64), (4, 128), (6, 256), (3, 512)].into_iter().enumerate() {
        for b in 0..blocks {
            let out = 4 * width;
            total += conv(in_ch, width, 1) + bn(width);
            total += conv(width, width, 3) + bn(width);
            total += conv(width, out, 1) + bn(out);
            let strided = stage > 0 && b == 0;
            if in_ch != out || strided {
                total += conv(in_ch, out, 1) + bn(out);
            }
            in_ch = out;
        }
    }
    total
}

#[test]
fn resnet50_backbone_parameter_count() {
    assert_eq!(resnet50_oracle(3), 23_508_032);
    let m = ModelGraph::<f32>::build_backbone(Preset::Resnet50, InputSpec::new(3, 32, 32), 0).unwrap();
    let s = m.parameter_summary();
    assert_eq!(s.total, 23_508_032);
    assert_eq!(s.trainable, s.total);
    assert_eq!(m.feature_shape(), vec![2048, 1, 1]);
}

#[test]
fn resnet50_forward_at_minimum_size() {
    let mut m = ModelGraph::<f32>::build_backbone(Preset::Resnet50, InputSpec::new(3, 32, 32), 0).unwrap();
    m.attach_linear_head(5).unwrap();
    let x = Tensor::<f32>::full(&[1, 3, 32, 32], 0.5).unwrap();
    let y = m.predict(&x).unwrap();
    assert_eq!(y.shape(), &[1, 5]);
    assert!((y.to_f64_vec().iter().sum::<f64>() - 1.0).abs() < 1e-5);
}

#[test]
fn zero_learning_rate_keeps_the_loss_constant() {
    let data = synth_dataset(&SynthSpec::new(3, 10, 16, 2)).unwrap();
    let mut m = ModelGraph::<f64>::build_backbone(Preset::Identity, InputSpec::new(3, 16, 16), 1).unwrap();
    m.attach_linear_head(3).unwrap();
    m.set_trainable(TrainablePolicy::UnfreezeAll).unwrap();
    let mut cfg = TrainConfig::baseline();
    cfg.base_lr = 0.0;
    cfg.plateau = None;
    cfg.max_epochs = 4;
    cfg.early_stop_patience = None;
    cfg.augment.enabled = false;
    cfg.shuffle = false;
    let before = m.named_tensors();
    let r = train(m, &data, &cfg).unwrap();
    let first = &r.history[0];
    assert_eq!(r.history.len(), 4);
    for e in &r.history {
        assert_eq!(e.train_loss, first.train_loss);
        assert_eq!(e.val_loss, first.val_loss);
        assert_eq!(e.lr, 0.0);
    }
    for ((name, a), (_, b)) in before.iter().zip(r.model.named_tensors()) {
        assert!(a.bit_eq(&b), "{name} moved");
    }
}
