use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use splatstyle::features::{
    extract, extract_on_tape, load_sgsw, read_sgsw, weight_name, write_sgsw, ConvNetWeights, SgswError,
    VGG16,
};
use splatstyle::tensor::{finite_difference_check_at, Tensor};

mod common;
use common::*;

#[test]
fn synthetic_weights_match_exporter_checksums() {
    let m = manifest();
    let w = ConvNetWeights::synthetic(m["seed"].as_u64().unwrap());
    let named = read_sgsw(&w.to_sgsw()).unwrap();
    assert_eq!(named.len(), 26);
    for (name, t) in &named {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let digest = format!("{:x}", Sha256::digest(&bytes));
        assert_eq!(digest, m["weights"][name].as_str().unwrap(), "{name}");
    }
}

#[test]
fn forward_matches_fixtures() {
    let m = manifest();
    let w = ConvNetWeights::synthetic(m["seed"].as_u64().unwrap());
    for fx in m["fixtures"].as_array().unwrap() {
        let file = fx["file"].as_str().unwrap();
        let tensors = load_sgsw(fixture_dir().join(file)).unwrap();
        let image = &tensors.iter().find(|(n, _)| n == "image").unwrap().1;
        let layers: Vec<&str> = fx["layers"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        let got = extract(image, &w, &layers, &IMAGENET).unwrap();
        for layer in &layers {
            let want = &tensors.iter().find(|(n, _)| n == layer).unwrap().1;
            let err = relative_error(&got[*layer], want);
            assert!(err <= 1e-4, "{file} {layer}: {err}");
        }
    }
}

#[test]
fn weights_round_trip_through_sgsw() {
    let w = ConvNetWeights::synthetic(3);
    let bytes = w.to_sgsw();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vgg.sgsw");
    std::fs::write(&path, &bytes).unwrap();
    let back = ConvNetWeights::load(&path).unwrap();
    assert_eq!(back.to_sgsw(), bytes);
}

#[test]
fn wrong_shape_names_the_tensor() {
    let w = ConvNetWeights::synthetic(3);
    let mut named = read_sgsw(&w.to_sgsw()).unwrap();
    let slot = named.iter_mut().find(|(n, _)| *n == weight_name("conv3_1")).unwrap();
    slot.1 = Tensor::zeros([256, 128, 3, 4]);
    let refs: Vec<(&str, &Tensor<f32>)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let bytes = write_sgsw(refs);
    match ConvNetWeights::from_named(read_sgsw(&bytes).unwrap()) {
        Err(SgswError::Shape { name, got, .. }) => {
            assert_eq!(name, "conv3_1.weight");
            assert_eq!(got, vec![256, 128, 3, 4]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn missing_and_extra_tensors_rejected() {
    let w = ConvNetWeights::synthetic(3);
    let mut named = read_sgsw(&w.to_sgsw()).unwrap();
    named.pop();
    assert!(matches!(ConvNetWeights::from_named(named.clone()), Err(SgswError::Missing(n)) if n == "conv5_3.bias"));
    named.push(("conv5_3.bias".into(), Tensor::zeros([512])));
    named.push(("fc6.weight".into(), Tensor::zeros([4])));
    assert!(matches!(ConvNetWeights::from_named(named), Err(SgswError::Unexpected(n)) if n == "fc6.weight"));
}

#[test]
fn architecture_table_is_vgg16() {
    let params: usize = VGG16.iter().map(|(_, i, o)| o * i * 9 + o).sum();
    assert_eq!(params, 14_714_688);
}

#[test]
fn image_gradient_matches_finite_differences() {
    let w = ConvNetWeights::synthetic(5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image = Tensor::from_fn([3, 32, 32], |_| rng.gen_range(0.0..1.0f64));
    let layers = ["conv2_1", "conv3_1"];
    let f = |tape: &mut splatstyle::tensor::Tape<f64>, x| {
        let feats = extract_on_tape(tape, x, &w, &layers, &IMAGENET).unwrap();
        let a = tape.sum(feats[0])?;
        let b = tape.sum(feats[1])?;
        tape.add(a, b)
    };
    let indices: Vec<usize> = (0..24).map(|_| rng.gen_range(0..image.len())).collect();
    // Thousands of relu and max-pool kinks sit downstream of each pixel; a
    // 1e-4 probe occasionally straddles one.
    let report = finite_difference_check_at(f, &image, 1e-6, &indices).unwrap();
    assert_eq!(report.nan_count, 0);
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}
