use std::path::PathBuf;

use excitor_core::data::{encode, format_alpaca, render, AlpacaSample, TemplateStyle};
use excitor_core::model::{Model, ModelConfig};
use excitor_core::multimodal::{toy_encode, VisualPrompt};
use excitor_core::{SplitMix64, Tensor};
use excitor_lab::ckpt::{load_visual, save_visual, visual_from_checkpoint, Checkpoint, DType, TensorEntry};
use excitor_lab::config::{AdapterKind, RunConfig};
use excitor_lab::io::{attach_from_checkpoint, from_checkpoint, load_params, to_checkpoint, Tensors};
use excitor_lab::{FormatError, LabError};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("excitor-formats-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn format_err(e: LabError) -> FormatError {
    match e {
        LabError::Format(f) => f,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn golden_alpaca_templates() {
    let cases = [
        ("alpaca_input.txt", AlpacaSample::new("reverse", "abc", "cba"), TemplateStyle::Alpaca),
        ("alpaca_no_input.txt", AlpacaSample::new("name the image", "", "cat"), TemplateStyle::Alpaca),
        ("compact_input.txt", AlpacaSample::new("reverse", "abc", "cba"), TemplateStyle::Compact),
    ];
    for (file, sample, style) in cases {
        let want = std::fs::read(fixture(file)).unwrap();
        assert_eq!(render(&sample, style).as_bytes(), &want[..], "{file}");
        let enc = format_alpaca(&sample, style, 256).unwrap();
        let mut ids = encode(std::str::from_utf8(&want).unwrap()).unwrap();
        ids.push(0);
        assert_eq!(enc.tokens, ids);
        assert_eq!(enc.mask.iter().filter(|&&m| m).count(), sample.output.len() + 1);
    }
}

fn model_with_adapter<R: excitor_lab::ckpt::Scalar>(kind: AdapterKind) -> (Model<R>, RunConfig) {
    let mut cfg = RunConfig::toy();
    cfg.model = ModelConfig {
        n_layers: 2,
        dim: 16,
        n_heads: 2,
        mlp_hidden: 32,
        ..ModelConfig::toy()
    };
    cfg.excitor.n_excited_layers = 2;
    cfg.lora.n_layers = 2;
    cfg.prefix.n_layers = 2;
    let base = Model::<R>::new(cfg.model, 3).unwrap();
    cfg.model_seed = 3;
    let mut m = excitor_lab::harness::prepare(&base, &cfg, kind, 4).unwrap();
    m.randomize(0.5, 0.5, 9);
    (m, cfg)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for kind in [AdapterKind::Excitor, AdapterKind::ExcitorMm, AdapterKind::Lora, AdapterKind::Prefix] {
        let (m, cfg) = model_with_adapter::<f32>(kind);
        let ck = to_checkpoint(&m, &cfg, kind, Tensors::All);
        let path = tmp(&format!("{}.xct1", kind.name()));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let (m2, cfg2, kind2) = from_checkpoint::<f32>(&back).unwrap();
        assert_eq!(kind2, kind);
        assert_eq!(cfg2.model, cfg.model);
        for (_, p) in m.params.iter() {
            let q = m2.params.get(m2.params.lookup(&p.name).unwrap());
            let a: Vec<u32> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = q.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{}", p.name);
        }
        assert_eq!(ck.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    }
}

#[test]
fn f64_round_trip_and_cross_precision_load() {
    let (m, cfg) = model_with_adapter::<f64>(AdapterKind::Excitor);
    let ck = to_checkpoint(&m, &cfg, AdapterKind::Excitor, Tensors::All);
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert!(back.tensors.iter().all(|t| t.dtype == DType::F64));
    let (m64, _, _) = from_checkpoint::<f64>(&back).unwrap();
    for (_, p) in m.params.iter() {
        let q = m64.params.value(m64.params.lookup(&p.name).unwrap());
        assert!(p.value.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let (m32, _, _) = from_checkpoint::<f32>(&back).unwrap();
    let id = m32.params.lookup("embed").unwrap();
    let want = m.params.value(m.params.lookup("embed").unwrap()).data()[0] as f32;
    assert_eq!(m32.params.value(id).data()[0], want);
}

#[test]
fn adapter_only_checkpoint_attaches_to_base() {
    let (m, cfg) = model_with_adapter::<f32>(AdapterKind::Excitor);
    let ck = to_checkpoint(&m, &cfg, AdapterKind::Excitor, Tensors::AdapterOnly);
    assert!(ck.names().iter().all(|n| n.starts_with("excitor.")));
    let full = to_checkpoint(&m, &cfg, AdapterKind::Excitor, Tensors::All);
    let only_base = Checkpoint {
        meta: full.meta.clone(),
        tensors: full.tensors.into_iter().filter(|t| !t.name.starts_with("excitor.")).collect(),
    };
    let mut base = Model::<f32>::new(cfg.model, cfg.model_seed).unwrap();
    load_params(&mut base, &only_base, true).unwrap();
    let (attached, kind) = attach_from_checkpoint(&base, &ck).unwrap();
    assert_eq!(kind, AdapterKind::Excitor);
    let tokens = encode("I:copy\nX:abc\nR:").unwrap();
    let a = m.logits(&tokens, None).unwrap();
    let b = attached.logits(&tokens, None).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn unknown_tensors_are_listed() {
    let (m, cfg) = model_with_adapter::<f32>(AdapterKind::Excitor);
    let ck = to_checkpoint(&m, &cfg, AdapterKind::Excitor, Tensors::All);
    let mut base = Model::<f32>::new(cfg.model, cfg.model_seed).unwrap();
    let err = format_err(load_params(&mut base, &ck, false).unwrap_err());
    match err {
        FormatError::UnknownTensors(names) => {
            assert!(!names.is_empty());
            assert!(names.iter().all(|n| n.starts_with("excitor.")));
            assert!(names.contains(&"excitor.layer.0.gate".to_string()) || names.contains(&"excitor.layer.1.gate".to_string()));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_tensors_and_wrong_shapes_are_rejected() {
    let (m, cfg) = model_with_adapter::<f32>(AdapterKind::None);
    let mut ck = to_checkpoint(&m, &cfg, AdapterKind::None, Tensors::All);
    ck.tensors.retain(|t| t.name != "embed");
    let mut fresh = Model::<f32>::new(cfg.model, 3).unwrap();
    assert!(matches!(
        format_err(load_params(&mut fresh, &ck, true).unwrap_err()),
        FormatError::MissingTensors(n) if n == vec!["embed".to_string()]
    ));
    let mut ck = to_checkpoint(&m, &cfg, AdapterKind::None, Tensors::All);
    let t = ck.tensors.iter_mut().find(|t| t.name == "embed").unwrap();
    t.shape.reverse();
    assert!(matches!(
        format_err(load_params(&mut fresh, &ck, true).unwrap_err()),
        FormatError::Tensor { .. }
    ));
}

fn sample_bytes() -> Vec<u8> {
    let mut ck = Checkpoint::new();
    ck.set_meta("k", "v");
    let mut rng = SplitMix64::new(1);
    ck.push("a", &Tensor::<f32>::randn(&[3, 4], 1.0, &mut rng));
    ck.push("b", &Tensor::<f64>::randn(&[5], 1.0, &mut rng));
    ck.to_bytes().unwrap()
}

#[test]
fn corrupt_containers_are_rejected() {
    let bytes = sample_bytes();
    assert!(Checkpoint::from_bytes(&bytes).is_ok());

    let mut bad = bytes.clone();
    bad[0] = b'Y';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(FormatError::BadMagic(m)) if &m == b"YCT1"));

    for cut in [0, 3, 10, 25, bytes.len() - 1] {
        assert!(
            matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(FormatError::Truncated { .. })),
            "cut at {cut}"
        );
    }

    let mut long = bytes.clone();
    long.extend_from_slice(&[0, 0]);
    assert_eq!(Checkpoint::from_bytes(&long), Err(FormatError::TrailingBytes(2)));

    let text = String::from_utf8_lossy(&bytes).replace("tensor a f32 3x4", "tensor a f32 3x5");
    let meta_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let mut edited = bytes[..20].to_vec();
    edited.extend_from_slice(&text.as_bytes()[20..20 + meta_len]);
    edited.extend_from_slice(&bytes[20 + meta_len..]);
    assert!(matches!(Checkpoint::from_bytes(&edited), Err(FormatError::Metadata { .. })));
}

#[test]
fn duplicate_and_unencodable_names_are_rejected_on_write() {
    let mut ck = Checkpoint::new();
    let t = Tensor::<f32>::zeros(&[2]);
    ck.push("x", &t);
    ck.push("x", &t);
    assert!(ck.to_bytes().is_err());
    let mut ck = Checkpoint::new();
    ck.push("has space", &t);
    assert!(ck.to_bytes().is_err());
    let mut ck = Checkpoint::new();
    ck.set_meta("bad=key", 1);
    assert!(ck.to_bytes().is_err());
}

#[test]
fn scalar_tensors_round_trip() {
    let mut ck = Checkpoint::new();
    ck.push("s", &Tensor::<f32>::new(vec![], vec![2.5]).unwrap());
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(back.tensors[0].shape, Vec::<usize>::new());
    assert_eq!(back.tensors[0].to_tensor::<f32>().unwrap().data(), &[2.5]);
}

#[test]
fn visual_round_trip_is_bit_exact() {
    let image = std::fs::read(fixture("image_8x8.bin")).unwrap();
    assert_eq!(image.len(), 64);
    let vp: VisualPrompt<f32> = toy_encode(&image, 16, "fixture").unwrap();
    assert_eq!(vp.features.shape(), &[5, 16]);
    let path = tmp("visual.xct1");
    save_visual(&path, &vp).unwrap();
    let back: VisualPrompt<f32> = load_visual(&path).unwrap();
    assert_eq!(back.source_id, "fixture");
    let a: Vec<u32> = vp.features.data().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u32> = back.features.data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
}

#[test]
fn visual_files_must_hold_one_rank_two_tensor() {
    let mut rng = SplitMix64::new(2);
    let mut ck = Checkpoint::new();
    ck.push("visual.features", &Tensor::<f32>::randn(&[2, 3, 4], 1.0, &mut rng));
    assert!(matches!(
        format_err(visual_from_checkpoint::<f32>(&ck).unwrap_err()),
        FormatError::Tensor { .. }
    ));
    let mut ck = Checkpoint::new();
    ck.push("other", &Tensor::<f32>::randn(&[2, 3], 1.0, &mut rng));
    assert!(visual_from_checkpoint::<f32>(&ck).is_err());
    let mut ck = Checkpoint::new();
    ck.tensors.push(TensorEntry {
        name: "visual.features".into(),
        dtype: DType::F32,
        shape: vec![2, 3],
        bytes: vec![0; 24],
    });
    assert!(visual_from_checkpoint::<f32>(&ck).is_ok());
}
