use gliomkit::cohort::{load_subject, write_subject};
use gliomkit::net::layers::BnMode;
use gliomkit::net::model::loss_and_grad;
use gliomkit::net::train::UniformSampler;
use gliomkit::net::{load_net, predict_volume, prepare_slices, save_net, NetSpec, PixelNet, SampleBatch, TrainConfig, Trainer, TrainingSlice};
use gliomkit::phantom::{generate_cohort, generate_phantom, PhantomConfig};
use gliomkit::radiomics::{assemble_features, FeatureSpec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn phantoms_survive_the_disk_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let p = generate_phantom(3, 1, &PhantomConfig::default());
    write_subject(t.path(), &p.stack, Some(&p.labels)).unwrap();
    let s = load_subject(t.path(), p.stack.subject_id(), &[]).unwrap();
    assert_eq!(s.labels.as_ref(), Some(&p.labels));
    assert_eq!(s.stack, p.stack);
    let spec = FeatureSpec::paper50();
    let a = assemble_features(&p.labels, &p.stack, p.age, &spec).unwrap();
    let b = assemble_features(s.labels.as_ref().unwrap(), &s.stack, p.age, &spec).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_reproduces_predictions() {
    let cohort = generate_cohort(8, 3, &PhantomConfig::default());
    let slices: Vec<_> = cohort.iter().flat_map(|p| prepare_slices(&p.stack, &p.labels).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = PixelNet::new(NetSpec::toy(&[4, 4], true, 8), &mut rng).unwrap();
    let mut tr = Trainer::new(
        net,
        TrainConfig {
            pixels_per_image: 300,
            ..Default::default()
        },
    );
    for _ in 0..2 {
        tr.train_epoch(&slices).unwrap();
    }
    let mut buf = Vec::new();
    save_net(&tr.net, &mut buf).unwrap();
    let loaded = load_net(&buf[..]).unwrap();
    for p in &cohort {
        let a = predict_volume(&tr.net, &p.stack).unwrap();
        let b = predict_volume(&loaded, &p.stack).unwrap();
        let same = a.data().iter().zip(b.data()).filter(|(x, y)| x == y).count();
        assert!(same as f64 >= 0.999 * a.data().len() as f64);
    }
}

fn batch_loss(net: &PixelNet, slices: &[&TrainingSlice], rng: &mut ChaCha8Rng) -> f64 {
    let b = SampleBatch::from_slices(slices, 500, &UniformSampler, rng).unwrap();
    let cache = net.forward(&b.images, &b.pixel_refs(), BnMode::Train).unwrap();
    loss_and_grad(&cache, &b.flat_labels()).unwrap().0
}

/// The phantom population is mirror-symmetric in distribution, so mirrored
/// batches must score like plain ones.
#[test]
fn flipped_batches_match_plain_loss_distribution() {
    let cohort = generate_cohort(21, 20, &PhantomConfig::default());
    let slices: Vec<TrainingSlice> = cohort.iter().flat_map(|p| prepare_slices(&p.stack, &p.labels).unwrap()).collect();
    let flipped: Vec<TrainingSlice> = slices.iter().map(|s| s.flipped()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = PixelNet::new(NetSpec::toy(&[4, 4], true, 8), &mut rng).unwrap();
    let stats = |pool: &[TrainingSlice], rng: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        let losses: Vec<f64> = (0..60)
            .map(|_| {
                idx.shuffle(rng);
                let refs: Vec<&TrainingSlice> = idx[..10].iter().map(|&i| &pool[i]).collect();
                batch_loss(&net, &refs, rng)
            })
            .collect();
        let m = losses.iter().sum::<f64>() / losses.len() as f64;
        let v = losses.iter().map(|l| (l - m).powi(2)).sum::<f64>() / (losses.len() - 1) as f64;
        (m, v / losses.len() as f64)
    };
    let (mp, sp) = stats(&slices, &mut rng);
    let (mf, sf) = stats(&flipped, &mut rng);
    assert!((mp - mf).abs() <= 4.0 * (sp + sf).sqrt(), "plain {mp} vs flipped {mf}");
}
