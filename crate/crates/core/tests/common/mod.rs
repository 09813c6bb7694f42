//! Fuzzing helpers and brute-force oracles shared by integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgnet_core::Taxonomy;

/// A random taxonomy plus the parent map it was generated from.
pub struct FuzzCase {
    pub taxonomy: Taxonomy,
    pub parent: Vec<usize>,
    pub super_logits: Vec<f64>,
    pub finer_logits: Vec<f64>,
}

/// Logits are drawn from a coarse grid half of the time so ties occur.
fn logit(rng: &mut ChaCha8Rng, coarse: bool) -> f64 {
    if coarse {
        rng.random_range(0..4) as f64
    } else {
        rng.random_range(-8.0..8.0)
    }
}

pub fn fuzz_case(seed: u64) -> FuzzCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_super = rng.random_range(1..=7);
    let sizes: Vec<usize> = (0..n_super).map(|_| rng.random_range(1..=5)).collect();
    let n: usize = sizes.iter().sum();
    // finer index i gets name "f{perm[i]}", so document order differs from index order
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut group_of_name = Vec::with_capacity(n);
    for (s, &k) in sizes.iter().enumerate() {
        group_of_name.extend(std::iter::repeat_n(s, k));
    }
    let groups = sizes
        .iter()
        .enumerate()
        .map(|(s, _)| {
            let names = (0..n).filter(|&j| group_of_name[j] == s).map(|j| format!("f{j}")).collect();
            (format!("s{s}"), names)
        })
        .collect();
    let order = perm.iter().map(|j| format!("f{j}")).collect();
    let taxonomy = Taxonomy::new("fuzz", groups, Some(order)).unwrap();
    let parent = perm.iter().map(|&j| group_of_name[j]).collect();
    let coarse = rng.random_bool(0.5);
    let super_logits = (0..n_super).map(|_| logit(&mut rng, coarse)).collect();
    let finer_logits = (0..n).map(|_| logit(&mut rng, coarse)).collect();
    FuzzCase {
        taxonomy,
        parent,
        super_logits,
        finer_logits,
    }
}

/// First index holding the maximum, by exhaustive scan.
pub fn first_max(values: &[f64], candidates: impl Iterator<Item = usize>) -> usize {
    let mut best: Option<usize> = None;
    for i in candidates {
        if best.is_none_or(|b| values[i] > values[b]) {
            best = Some(i);
        }
    }
    best.unwrap()
}

/// `(super, finer)` by restricting the finer argmax to the winning super.
pub fn tsi_oracle(parent: &[usize], super_logits: &[f64], finer_logits: &[f64]) -> (usize, usize) {
    let s = first_max(super_logits, 0..super_logits.len());
    let f = first_max(finer_logits, (0..finer_logits.len()).filter(|&f| parent[f] == s));
    (s, f)
}

pub fn di_oracle(parent: &[usize], finer_logits: &[f64]) -> (usize, usize) {
    let f = first_max(finer_logits, 0..finer_logits.len());
    (parent[f], f)
}

pub mod training {
    use std::path::Path;

    use sgnet_core::data::{DatasetRecord, Normalization, SynthSpec};
    use sgnet_core::train::{train, RunLog, TrainSchedule, TrainSetup};
    use sgnet_core::{SgnetConfig, SgnetModel, Taxonomy};

    /// A 2×2 synthetic problem small enough for a few seconds of training.
    pub fn small_synth(samples_per_finer: usize) -> SynthSpec {
        SynthSpec {
            n_super: 2,
            finer_per_super: 2,
            samples_per_finer,
            super_separation: 40.0,
            finer_separation: 16.0,
            noise: 40.0,
            image_size: 16,
            seed: 5,
        }
    }

    pub fn schedule(epochs: usize) -> TrainSchedule {
        TrainSchedule {
            base_lr: 0.05,
            milestones: vec![epochs / 2],
            gamma: 0.1,
            warmup_epochs: 1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 16,
            total_epochs: epochs,
        }
    }

    pub struct Trained {
        pub model: SgnetModel<f32>,
        pub log: RunLog,
        pub records: Vec<DatasetRecord>,
        pub taxonomy: Taxonomy,
        pub normalization: Normalization,
    }

    pub fn train_small(seed: u64, epochs: usize, checkpoint_dir: Option<&Path>) -> Trained {
        let (records, taxonomy) = sgnet_core::data::synth_hier_dataset(&small_synth(16)).unwrap();
        let cfg = SgnetConfig::preset("sgnet-synth-2x2").unwrap();
        let mut model = SgnetModel::<f32>::build(&cfg, seed).unwrap();
        let normalization = Normalization::from_records(&records);
        let sched = schedule(epochs);
        let setup = TrainSetup {
            schedule: &sched,
            taxonomy: &taxonomy,
            alpha: 0.5,
            seed,
            augment: true,
            normalization,
            eval_sets: vec![("train".into(), &records)],
            checkpoint_dir: checkpoint_dir.map(Path::to_path_buf),
            config_digest: "test".into(),
        };
        let log = train(&mut model, &records, &setup, |_| {}).unwrap();
        Trained {
            model,
            log,
            records,
            taxonomy,
            normalization,
        }
    }
}

pub mod tables {
    use sgnet_core::taxonomy::CIFAR100_NAME_ALIASES;
    use sgnet_core::Taxonomy;

    /// The CIFAR-100 grouping as printed, table spelling.
    pub const CIFAR_TABLE: [(&str, [&str; 5]); 20] = [
        ("aquatic mammals", ["beaver", "dolphin", "otter", "seal", "whale"]),
        ("fish", ["aquarium fish", "flatfish", "ray", "shark", "trout"]),
        ("flowers", ["orchids", "poppies", "roses", "sunflowers", "tulips"]),
        ("food containers", ["bottles", "bowls", "cans", "cups", "plates"]),
        ("fruit and vegetables", ["apples", "mushrooms", "oranges", "pears", "sweet peppers"]),
        ("household electrical devices", ["clock", "computer keyboard", "lamp", "telephone", "television"]),
        ("household furniture", ["bed", "chair", "couch", "table", "wardrobe"]),
        ("insects", ["bee", "beetle", "butterfly", "caterpillar", "cockroach"]),
        ("large carnivores", ["bear", "leopard", "lion", "tiger", "wolf"]),
        ("large man-made outdoor things", ["bridge", "castle", "house", "road", "skyscraper"]),
        ("large natural outdoor scenes", ["cloud", "forest", "mountain", "plain", "sea"]),
        ("large omnivores and herbivores", ["camel", "cattle", "chimpanzee", "elephant", "kangaroo"]),
        ("medium-sized mammals", ["fox", "porcupine", "possum", "raccoon", "skunk"]),
        ("non-insect invertebrates", ["crab", "lobster", "snail", "spider", "worm"]),
        ("people", ["baby", "boy", "girl", "man", "woman"]),
        ("reptiles", ["crocodile", "dinosaur", "lizard", "snake", "turtle"]),
        ("small mammals", ["hamster", "mouse", "rabbit", "shrew", "squirrel"]),
        ("trees", ["maple", "oak", "palm", "pine", "willow"]),
        ("vehicles 1", ["bicycle", "bus", "motorcycle", "pickup truck", "train"]),
        ("vehicles 2", ["lawn-mower", "rocket", "streetcar", "tank", "tractor"]),
    ];

    pub const COCO_TABLE: [(&str, &[&str]); 12] = [
        ("person", &["person"]),
        ("vehicle", &["bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat"]),
        ("outdoor", &["traffic light", "fire hydrant", "stop sign", "parking meter", "bench"]),
        ("animal", &["bird", "cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe"]),
        ("accessory", &["backpack", "umbrella", "handbag", "tie", "suitcase"]),
        (
            "sports",
            &[
                "frisbee", "skis", "snowboard", "sports ball", "kite", "baseball bat", "baseball glove", "skateboard",
                "surfboard", "tennis racket",
            ],
        ),
        ("kitchen", &["bottle", "wine glass", "cup", "fork", "knife", "spoon", "bowl"]),
        (
            "food",
            &["banana", "apple", "sandwich", "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake"],
        ),
        ("furniture", &["chair", "couch", "potted plant", "bed", "dining table", "toilet"]),
        ("electronic", &["tv", "laptop", "mouse", "remote", "keyboard", "cell phone"]),
        ("appliance", &["microwave", "oven", "toaster", "sink", "refrigerator"]),
        ("indoor", &["book", "clock", "vase", "scissors", "teddy bear", "hair drier", "toothbrush"]),
    ];

    /// Dataset spelling of a printed CIFAR-100 name.
    pub fn dataset_name(table_name: &str) -> &str {
        CIFAR100_NAME_ALIASES
            .iter()
            .find(|(t, _)| *t == table_name)
            .map_or(table_name, |(_, d)| d)
    }

    /// First mismatch between a builtin and a printed table, if any.
    pub fn golden_mismatch(t: &Taxonomy, table: &[(&str, Vec<&str>)], alias: bool) -> Option<String> {
        let name = |n: &str| if alias { dataset_name(n).to_string() } else { n.to_string() };
        if t.num_super() != table.len() {
            return Some(format!("{} supers, table has {}", t.num_super(), table.len()));
        }
        let total: usize = table.iter().map(|(_, f)| f.len()).sum();
        if t.num_finer() != total {
            return Some(format!("{} finers, table has {total}", t.num_finer()));
        }
        for (s, (sup, finers)) in table.iter().enumerate() {
            if t.super_name(s) != Some(name(sup).as_str()) {
                return Some(format!("super {s}: {:?} vs {sup}", t.super_name(s)));
            }
            let mut got: Vec<String> =
                t.members_of(s).ok()?.iter().map(|&f| t.finer_name(f).unwrap_or("").to_string()).collect();
            let mut want: Vec<String> = finers.iter().map(|f| name(f)).collect();
            got.sort();
            want.sort();
            if got != want {
                return Some(format!("members of {sup}: {got:?} vs {want:?}"));
            }
        }
        None
    }

    pub fn cifar_rows() -> Vec<(&'static str, Vec<&'static str>)> {
        CIFAR_TABLE.iter().map(|(s, f)| (*s, f.to_vec())).collect()
    }

    pub fn coco_rows() -> Vec<(&'static str, Vec<&'static str>)> {
        COCO_TABLE.iter().map(|(s, f)| (*s, f.to_vec())).collect()
    }
}
