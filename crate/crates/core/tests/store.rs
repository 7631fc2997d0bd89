use peft_forge::adapters::*;
use peft_forge::data::{TaskName, TaskSpec};
use peft_forge::error::Error;
use peft_forge::model::*;
use peft_forge::stacking::{compose, VariantSpec};
use peft_forge::store::*;
use peft_forge::tensor::HasParams;

fn base() -> BaseModel<f32> {
    BaseModel::init(ModelConfig::default(), 3).unwrap()
}

fn trained_lora(b: &BaseModel<f32>) -> Adapter<f32> {
    let mut a = Adapter::init(&AdapterConfig::Lora(LoraConfig::default()), b, None, 4).unwrap();
    for (i, (_, t)) in a.params_mut().into_iter().enumerate() {
        for (j, x) in t.data_mut().iter_mut().enumerate() {
            *x += ((i * 31 + j) % 17) as f32 * 1e-3;
        }
    }
    a
}

/// Reads the container by hand: preamble, JSON header, payload floats.
fn parse(bytes: &[u8]) -> (u32, serde_json::Value, Vec<f32>) {
    assert_eq!(&bytes[..4], b"PEFT");
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    let mut n = [0u8; 8];
    n.copy_from_slice(&bytes[8..16]);
    let h = u64::from_le_bytes(n) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + h]).unwrap();
    let payload = bytes[16 + h..]
        .chunks(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    (version, header, payload)
}

#[test]
fn layout_by_hand() {
    let b = base();
    let a = trained_lora(&b);
    let bytes = adapter_bytes(&a, &b.config).unwrap();
    let (version, header, payload) = parse(&bytes);
    assert_eq!(version, 1);
    assert_eq!(header["kind"], "adapter");
    assert_eq!(
        header["fingerprint"].as_str().unwrap(),
        format!("{:016x}", fingerprint(&b.config))
    );
    let names: Vec<String> = a.params().into_iter().map(|(n, _)| n).collect();
    let listed: Vec<String> = header["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["name"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(listed, names);
    let flat: Vec<f32> = a
        .params()
        .into_iter()
        .flat_map(|(_, t)| t.data().to_vec())
        .collect();
    assert_eq!(payload.len(), flat.len());
    assert!(payload
        .iter()
        .zip(&flat)
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn files_round_trip_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let b = base();
    let p = dir.path().join("base.peft");
    save_base(&b, &p).unwrap();
    let back = load_base(&p).unwrap();
    let q = dir.path().join("base2.peft");
    save_base(&back, &q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    assert_eq!(back.checksum(), b.checksum());
    assert_eq!(read_header(&p).unwrap().kind, Kind::Base);

    let a = trained_lora(&b);
    let pa = dir.path().join("lora.peft");
    save_adapter(&a, &b.config, &pa).unwrap();
    let la = load_adapter(&pa, &b.config).unwrap();
    assert_eq!(
        adapter_bytes(&la, &b.config).unwrap(),
        std::fs::read(&pa).unwrap()
    );
    assert_eq!(la.digests(), a.digests());
}

#[test]
fn toy_lora_file_size() {
    let b = base();
    let a = Adapter::init(
        &AdapterConfig::Lora(LoraConfig {
            r: 4,
            alpha: 8.0,
            ..LoraConfig::default()
        }),
        &b,
        None,
        1,
    )
    .unwrap();
    assert_eq!(a.param_count(), 2048);
    let bytes = adapter_bytes(&a, &b.config).unwrap();
    let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), 16 + h + 8192);
}

#[test]
fn head_and_stack_round_trip() {
    let mut b = base();
    b.set_trainable(false);
    let task = TaskSpec::standard(TaskName::Los);
    let d = trained_lora(&b);
    let s = Adapter::init(&AdapterConfig::Lora(LoraConfig::default()), &b, None, 9).unwrap();
    let stack = compose(
        &b,
        VariantSpec::DomainFrozenPlusDownstream,
        Some(d),
        Some(s),
        &task,
        2,
    )
    .unwrap();
    let bytes = stack_bytes(&stack, &b.config).unwrap();
    let back = stack_from_bytes(&bytes, &b.config).unwrap();
    assert_eq!(back.digests(), stack.digests());
    assert_eq!(back.trainable_names(), stack.trainable_names());
    assert_eq!(stack_bytes(&back, &b.config).unwrap(), bytes);

    let head = stack.head.clone().unwrap();
    let hb = head_bytes(&head, &b.config).unwrap();
    let hback = head_from_bytes(&hb, &b.config).unwrap();
    assert_eq!(hback.task, task);
    assert!(hback.w.bits_eq(&head.w) && hback.bias.bits_eq(&head.bias));
    // Kinds are not interchangeable.
    assert!(adapter_from_bytes(&hb, &b.config).is_err());
    assert!(base_from_bytes(&bytes).is_err());
}

#[test]
fn corrupt_files_are_rejected() {
    let b = base();
    let good = adapter_bytes(&trained_lora(&b), &b.config).unwrap();
    let cfg = &b.config;

    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(
        adapter_from_bytes(&magic, cfg),
        Err(Error::Checkpoint(_))
    ));

    let mut version = good.clone();
    version[4..8].copy_from_slice(&2u32.to_le_bytes());
    let err = adapter_from_bytes(&version, cfg).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");

    for cut in [3, 15, 40, good.len() - 1] {
        assert!(
            adapter_from_bytes(&good[..cut], cfg).is_err(),
            "cut at {cut}"
        );
    }
    let mut long = good.clone();
    long.extend_from_slice(&[0, 0, 0, 0]);
    assert!(adapter_from_bytes(&long, cfg).is_err());

    let mut huge = good.clone();
    huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(adapter_from_bytes(&huge, cfg).is_err());
}

#[test]
fn fingerprint_guards_every_mismatch() {
    let b = base();
    let bytes = adapter_bytes(&trained_lora(&b), &b.config).unwrap();
    let variants = [
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            d_ff: 128,
            ..ModelConfig::default()
        },
        ModelConfig {
            n_layers: 3,
            ..ModelConfig::default()
        },
        ModelConfig {
            vocab_size: 600,
            ..ModelConfig::default()
        },
        ModelConfig {
            max_seq_len: 256,
            ..ModelConfig::default()
        },
        ModelConfig {
            d_ff: 200,
            ..ModelConfig::default()
        },
        ModelConfig {
            n_heads: 2,
            ..ModelConfig::default()
        },
        ModelConfig {
            rms_eps: 1e-6,
            ..ModelConfig::default()
        },
    ];
    for other in &variants {
        assert_ne!(fingerprint(other), fingerprint(&b.config));
        assert!(
            matches!(
                adapter_from_bytes(&bytes, other),
                Err(Error::Fingerprint { .. })
            ),
            "{other:?}"
        );
    }
    assert_eq!(fingerprint(&ModelConfig::default()), fingerprint(&b.config));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_base(&dir.path().join("nope.peft")),
        Err(Error::Io { .. })
    ));
}
