use biacl::checkpoint;
use biacl::data::curriculum_order;
use biacl::decoding::SearchParams;
use biacl::synth::translate;
use biacl::training::{train, AblationMask, Langs, TrainConfig, TrainTask};
use biacl::{BilingualDictionary, ModelConfig, Scalar, Seq2Seq, TokenId};

const EOS: TokenId = 1;
const SRC: TokenId = 2;
const TGT: TokenId = 3;

fn corpus() -> Vec<Vec<TokenId>> {
    (0..12).map(|i| (0..2 + i % 3).map(|j| 4 + (i * 5 + j * 3) % 6).collect()).collect()
}

fn dict() -> BilingualDictionary<TokenId> {
    let mut d = BilingualDictionary::new("tgt", "src");
    for t in 4..9 {
        d.insert(vec![t], vec![t + 6]);
    }
    d
}

fn tiny<T: Scalar>() -> Seq2Seq<T> {
    let mut mc = ModelConfig::new(16, vec![SRC, TGT]);
    mc.d_model = 8;
    mc.layers = 1;
    mc.heads = 2;
    mc.ff_dim = 16;
    mc.max_len = 12;
    Seq2Seq::new(mc, 9).unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 4,
        beam: 2,
        max_len: 8,
        phi: 0.5,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

fn trained<T: Scalar>() -> Seq2Seq<T> {
    let (c, d) = (corpus(), dict());
    let task = TrainTask {
        corpus: &c,
        dict: &d,
        langs: Langs { target: TGT, source: SRC },
        eos: EOS,
        banned: vec![0, SRC, TGT],
    };
    let mut model = tiny::<T>();
    let out = train(&mut model, &task, &cfg(), AblationMask::ALL, None).unwrap();
    let kept = curriculum_order(&c, &d, 0.5).unwrap().order.len();
    assert_eq!(out.steps(), kept.div_ceil(4));
    model
}

#[test]
fn checkpoint_round_trip_preserves_translations() {
    let model = trained::<f64>();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &model).unwrap();
    let back: Seq2Seq<f64> = checkpoint::load(&path).unwrap();
    assert_eq!(back.params().tensors(), model.params().tensors());
    let search = SearchParams::new(2, 8, EOS);
    for s in [vec![10, 11], vec![12, 13, 14]] {
        let a = translate(&model, &s, SRC, TGT, &search).unwrap();
        let b = translate(&back, &s, SRC, TGT, &search).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn training_changes_parameters_and_is_repeatable() {
    let a = trained::<f64>();
    let b = trained::<f64>();
    assert_eq!(a.params().tensors(), b.params().tensors());
    assert_ne!(a.params().tensors(), tiny::<f64>().params().tensors());
}

#[test]
fn single_precision_trains_too() {
    let m = trained::<f32>();
    assert!(m.params().tensors().iter().all(|t| t.is_finite()));
}
