use bvqa_core::fusion::{fuse, gap_gsp_pool, temporal_subsample};
use bvqa_core::io::{
    load_manifest, read_tensor_file, save_manifest, split_records, write_tensor, write_tensor_file,
};
use bvqa_core::{Manifest, Split, TensorFile, Tensor, VideoRecord};
use proptest::prelude::*;

fn tensor_file() -> impl Strategy<Value = TensorFile> {
    prop::collection::vec(0u64..5, 0..=4).prop_flat_map(|dims| {
        let n = dims.iter().product::<u64>() as usize;
        // Raw bit patterns cover NaN payloads, infinities and subnormals.
        prop::collection::vec(any::<u32>(), n).prop_map(move |bits| {
            TensorFile::new(dims.clone(), bits.into_iter().map(f32::from_bits).collect()).unwrap()
        })
    })
}

fn bits(f: &TensorFile) -> Vec<u32> {
    f.data.iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #[test]
    fn write_then_read_is_bit_exact(file in tensor_file()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bvqf");
        write_tensor_file(&path, &file).unwrap();
        let back = read_tensor_file(&path).unwrap();
        prop_assert_eq!(&back.dims, &file.dims);
        prop_assert_eq!(bits(&back), bits(&file));
        prop_assert_eq!(std::fs::read(&path).unwrap(), file.encode());
    }

    #[test]
    fn pooling_commutes_with_channel_permutation(
        (t, h, w, c) in (1usize..4, 1usize..4, 1usize..4, 1usize..6),
        seed in any::<u64>(),
    ) {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..t * h * w * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);

        let act = Tensor::new(vec![t, h, w, c], values.clone()).unwrap();
        let permuted_act: Vec<f64> = values
            .chunks_exact(c)
            .flat_map(|px| perm.iter().map(move |&j| px[j]))
            .collect();
        let act_p = Tensor::new(vec![t, h, w, c], permuted_act).unwrap();

        let pooled = gap_gsp_pool(&act).unwrap();
        let pooled_p = gap_gsp_pool(&act_p).unwrap();
        for frame in 0..t {
            let row = pooled.row(frame).unwrap();
            let row_p = pooled_p.row(frame).unwrap();
            for (k, &j) in perm.iter().enumerate() {
                prop_assert_eq!(row_p[k], row[j]);
                prop_assert_eq!(row_p[c + k], row[c + j]);
            }
        }
    }

    #[test]
    fn fused_inputs_are_recovered_by_slicing(
        (t, cs, cm) in (1usize..6, 1usize..8, 1usize..8),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let s = Tensor::matrix(t, cs, draw(t * cs)).unwrap();
        let m = Tensor::matrix(t, cm, draw(t * cm)).unwrap();
        let fused = fuse(&s, &m).unwrap();
        for frame in 0..t {
            let row = fused.row(frame).unwrap();
            prop_assert_eq!(&row[..cs], s.row(frame).unwrap());
            prop_assert_eq!(&row[cs..], m.row(frame).unwrap());
        }
    }

    #[test]
    fn subsampling_keeps_the_ceiling_count(t in 1usize..50, factor in 1usize..5) {
        let seq = Tensor::matrix(t, 1, (0..t).map(|i| i as f64).collect()).unwrap();
        let sub = temporal_subsample(&seq, factor).unwrap();
        prop_assert_eq!(sub.shape()[0], t.div_ceil(factor));
        prop_assert!(sub.data().iter().all(|&v| (v as usize).is_multiple_of(factor)));
    }
}

#[test]
fn spatial_activations_pool_to_4096_channels() {
    let act = Tensor::full(&[2, 7, 7, 2048], 0.25);
    let pooled = gap_gsp_pool(&act).unwrap();
    assert_eq!(pooled.shape(), &[2, 4096]);
    assert!(pooled.row(1).unwrap()[2048..].iter().all(|&v| v == 0.0));
}

fn record(id: &str, db: &str, path: &str) -> VideoRecord {
    VideoRecord {
        video_id: id.into(),
        mos: 2.5,
        mos_std: Some(0.4),
        database_id: db.into(),
        fused_feature_path: path.into(),
    }
}

#[test]
fn manifest_preserves_record_order() {
    let dir = tempfile::tempdir().unwrap();
    let ids = ["zeta", "alpha", "mid", "beta"];
    for id in ids {
        write_tensor(&dir.path().join(format!("{id}.bvqf")), &Tensor::zeros(&[1, 2])).unwrap();
    }
    let records = ids.iter().map(|id| record(id, "db", &format!("{id}.bvqf"))).collect();
    let path = dir.path().join("m.json");
    save_manifest(&path, &Manifest::new(Split::All, 3, records)).unwrap();
    let loaded = load_manifest(&path).unwrap();
    let got: Vec<&str> = loaded.records.iter().map(|r| r.video_id.as_str()).collect();
    assert_eq!(got, ids);
    assert_eq!(loaded.records[0].mos_std, Some(0.4));
}

#[test]
fn missing_file_error_lists_every_absent_path() {
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest::new(
        Split::Val,
        0,
        vec![record("a", "db", "gone_a.bvqf"), record("b", "db", "gone_b.bvqf")],
    );
    let path = dir.path().join("m.json");
    save_manifest(&path, &m).unwrap();
    let msg = load_manifest(&path).unwrap_err().to_string();
    assert!(msg.contains("gone_a.bvqf") && msg.contains("gone_b.bvqf"), "{msg}");
}

#[test]
fn truncated_file_on_disk_reports_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bvqf");
    let mut bytes = TensorFile::new(vec![2, 2], vec![1.0; 4]).unwrap().encode();
    bytes.pop();
    std::fs::write(&path, bytes).unwrap();
    let msg = read_tensor_file(&path).unwrap_err().to_string();
    assert!(msg.contains("expected 16 bytes") && msg.contains("found 15"), "{msg}");
    assert!(msg.contains("t.bvqf"), "{msg}");
}

#[test]
fn splits_depend_only_on_the_seed() {
    let records: Vec<_> = (0..25).map(|i| record(&format!("v{i}"), "db", "x")).collect();
    let a = split_records(&records, 4);
    let b = split_records(&records, 4);
    let c = split_records(&records, 5);
    assert_eq!(a, b);
    assert_ne!(a[0].records, c[0].records);
    assert_eq!(
        a.iter().map(|m| m.records.len()).collect::<Vec<_>>(),
        vec![15, 5, 5]
    );
    assert!(a.iter().all(|m| m.seed == 4));
}
