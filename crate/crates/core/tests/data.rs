use pslora::data::{gen_task, make_sequence, mean_cosine, pretrain_mixture, SequenceSpec, Split};

fn small(seed: u64) -> SequenceSpec {
    SequenceSpec {
        train_per_task: 60,
        test_per_task: 30,
        ..SequenceSpec::drop_fixture(seed)
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = make_sequence(&small(3)).unwrap();
    let b = make_sequence(&small(3)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, make_sequence(&small(4)).unwrap());
}

#[test]
fn order_permutes_without_regenerating() {
    let spec = small(1);
    let fwd = make_sequence(&spec).unwrap();
    let rev = make_sequence(&SequenceSpec {
        order: vec![4, 3, 2, 1],
        ..spec.clone()
    })
    .unwrap();
    for k in 0..4 {
        assert_eq!(fwd.tasks[k], rev.tasks[3 - k]);
    }
    assert_eq!(gen_task(&spec, 2).unwrap(), fwd.tasks[1]);
}

#[test]
fn invalid_specs_are_rejected() {
    let spec = small(0);
    for order in [vec![1, 2, 3], vec![1, 1, 2, 3], vec![0, 1, 2, 3], vec![1, 2, 3, 5]] {
        assert!(make_sequence(&SequenceSpec { order, ..spec.clone() }).is_err());
    }
    assert!(gen_task(&spec, 0).is_err());
    assert!(gen_task(&spec, 5).is_err());
}

#[test]
fn large_rotation_is_the_least_similar_task() {
    let seq = make_sequence(&small(2)).unwrap();
    let near = mean_cosine(&seq.tasks[0], &seq.tasks[1]);
    let far = mean_cosine(&seq.tasks[0], &seq.tasks[3]);
    assert!(near > far, "{near} vs {far}");
}

#[test]
fn labels_are_in_range_and_sizes_match() {
    let spec = small(5);
    let seq = make_sequence(&spec).unwrap();
    assert_eq!(seq.test_sizes(), vec![30; 4]);
    for t in &seq.tasks {
        assert_eq!(t.train.len(), 60);
        assert_eq!(t.train.x.cols(), spec.d_in);
        assert!(t.train.y.iter().all(|&y| y < spec.n_classes));
    }
    let mix = pretrain_mixture(&spec).unwrap();
    assert_ne!(mix.tasks[0].train, seq.tasks[0].train);
}

#[test]
fn csv_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let seq = make_sequence(&small(6)).unwrap();
    seq.export_csv(dir.path()).unwrap();
    for k in 1..=4 {
        let back = Split::read_csv(&dir.path().join(format!("task{k}_test.csv"))).unwrap();
        assert_eq!(back.y, seq.tasks[k - 1].test.y);
        assert_eq!(back.x.shape(), seq.tasks[k - 1].test.x.shape());
        for (a, b) in back.x.data().iter().zip(seq.tasks[k - 1].test.x.data()) {
            assert_eq!(a, b);
        }
    }
}
