use std::fs;
use std::path::Path;

use rfm_core::data::Region;
use rfm_core::detector::{self, LinearDetector};
use rfm_core::harness::{self, AblationGrid, AblationVariant, ExperimentConfig, ModeName, RunManifest};
use rfm_core::imaging::Image;
use rfm_core::saliency::{self, ForgeryAttentionMap};

fn tiny(seed: u64, augmentation: &str) -> ExperimentConfig {
    let text = format!(
        r#"
seed = {seed}

[dataset]
kind = "synthetic"
train_count = 16
test_count = 12
size = 16

[architecture]
kind = "reference-cnn"
in_channels = 3
widths = [4, 8]
strides = [2, 2]

[train]
learning_rate = 0.002
batch_size = 8
flood_level = 0.04
iterations = 10

{augmentation}

[eval]
fdr_levels = [0.1]
less_forgery = ["eyes", "mouth"]

[visualize]
frame_counts = [4, 1000]
max_per_group = 8
"#
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

const RFM: &str = "[augmentation]\nmode = \"rfm\"\nblocks = 3\nprobability = 1.0\nmax_height = 4\nmax_width = 4\n";
const RFM_OFF: &str = "[augmentation]\nmode = \"rfm\"\nblocks = 3\nprobability = 0.0\nmax_height = 4\nmax_width = 4\n";

fn final_parameters(config: &ExperimentConfig) -> Vec<f64> {
    let sets = harness::load_datasets(config).unwrap();
    let mut det = harness::init_detector(config).unwrap();
    let mut losses = Vec::new();
    harness::train_detector(config, &sets.train, det.as_mut(), &mut losses, |_, _| Ok(())).unwrap();
    assert_eq!(losses.len(), config.train.iterations);
    det.parameters().to_vec()
}

#[test]
fn baseline_training_is_reproducible() {
    let c = tiny(3, "");
    assert_eq!(final_parameters(&c), final_parameters(&c));
}

#[test]
fn gated_off_mining_matches_baseline() {
    assert_eq!(final_parameters(&tiny(3, RFM_OFF)), final_parameters(&tiny(3, "")));
}

#[test]
fn every_augmentation_mode_trains() {
    for aug in [
        RFM,
        "[augmentation]\nmode = \"psfe\"\nblocks = 2\nmax_height = 3\nmax_width = 3\n",
        "[augmentation]\nmode = \"re\"\n",
        "[augmentation]\nmode = \"ae\"\nquantile = 0.2\n",
    ] {
        let p = final_parameters(&tiny(5, aug));
        assert!(p.iter().all(|v| v.is_finite()), "{aug}");
    }
}

#[test]
fn constant_detector_gives_chance_auc_and_idempotent_reports() {
    let c = tiny(2, "");
    let sets = harness::load_datasets(&c).unwrap();
    let det = LinearDetector::new(
        ndarray::Array3::zeros((3, 16, 16)),
        ndarray::Array3::zeros((3, 16, 16)),
        [0.1, 0.3],
    )
    .unwrap();
    let reports = harness::evaluate_detector(&c, &det, &sets.test).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.test_set.as_str()).collect();
    assert_eq!(names, ["standard", "less-eyes", "less-mouth"]);
    assert!(reports.iter().all(|r| r.auc == 0.5));
    assert_eq!(harness::evaluate_detector(&c, &det, &sets.test).unwrap(), reports);
}

#[test]
fn planted_separability_is_learned() {
    for seed in 1..=5 {
        let text = format!(
            "seed = {seed}\n[dataset]\nkind = \"synthetic\"\ntrain_count = 64\ntest_count = 64\nsize = 32\nstrength = 96.0\n\
             [train]\nlearning_rate = 0.002\nbatch_size = 16\nflood_level = 0.04\niterations = 150\n\
             [eval]\nfdr_levels = [0.1]\nless_forgery = []\ncoverage = false\n"
        );
        let c = ExperimentConfig::from_toml(&text).unwrap();
        let sets = harness::load_datasets(&c).unwrap();
        let (_, _, reports) = harness::run_cell(&c, &sets).unwrap();
        assert!(reports[0].auc >= 0.99, "seed {seed}: auc {}", reports[0].auc);
    }
}

#[test]
fn single_cell_grid_matches_direct_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(4, RFM);
    c.out = Some(dir.path().join("grid"));
    c.ablation = Some(AblationGrid::default());
    let table = harness::run_ablation(&c).unwrap();
    assert_eq!(table.rows.len(), 1);

    let mut direct = tiny(4, RFM);
    direct.out = Some(dir.path().join("direct"));
    harness::run_training(&direct).unwrap();
    let reports = harness::run_evaluation(&direct, None).unwrap();
    let row = &table.rows[0];
    let col = |name: &str| table.header.iter().position(|h| h == name).unwrap();
    for r in &reports {
        assert_eq!(row[col(&format!("{}_auc", r.test_set))], format!("{:.6}", r.auc));
        assert_eq!(row[col(&format!("{}_tdr@0.1", r.test_set))], format!("{:.6}", r.tdr[0].tdr));
    }
    let grid_ckpt = fs::read(dir.path().join("grid/ablation").join(&row[0]).join("final.ckpt")).unwrap();
    let direct_ckpt = fs::read(dir.path().join("direct/checkpoints/final.ckpt")).unwrap();
    assert_eq!(grid_ckpt, direct_ckpt);
}

#[test]
fn variant_grid_labels() {
    let mut c = tiny(1, RFM);
    c.out = Some(tempfile::tempdir().unwrap().keep());
    c.train.iterations = 2;
    c.ablation = Some(AblationGrid {
        variants: vec![AblationVariant::FamMeb, AblationVariant::Meb, AblationVariant::Fam, AblationVariant::Neither],
        ..Default::default()
    });
    let table = harness::run_ablation(&c).unwrap();
    let labels: Vec<&str> = table.rows.iter().map(|r| r[2].as_str()).collect();
    assert_eq!(labels, ["w/ FAM&MEB", "w/ MEB", "w/ FAM", "w/o MEB|FAM"]);
    fs::remove_dir_all(c.out.unwrap()).unwrap();
}

#[test]
fn hyperparameter_grid_matches_individual_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(6, RFM);
    c.out = Some(dir.path().to_path_buf());
    c.train.iterations = 4;
    c.dataset = ExperimentConfig::from_toml(
        "seed = 6\n[dataset]\nkind = \"synthetic\"\ntrain_count = 16\ntest_count = 12\nsize = 32\n",
    )
    .unwrap()
    .dataset;
    let grid = AblationGrid {
        sizes: vec![8, 16],
        probabilities: vec![0.5, 1.0],
        ..Default::default()
    };
    c.ablation = Some(grid.clone());
    let table = harness::run_ablation(&c).unwrap();
    assert_eq!(table.rows.len(), 4);
    let cells = harness::expand_grid(&c, &grid).unwrap();
    for (cell, row) in cells.iter().zip(&table.rows) {
        assert_eq!(cell.name, row[0]);
        let sets = harness::load_datasets(&cell.config).unwrap();
        let (_, _, reports) = harness::run_cell(&cell.config, &sets).unwrap();
        assert_eq!(row[table.header.iter().position(|h| h == "standard_auc").unwrap()], format!("{:.6}", reports[0].auc));
    }
}

#[test]
fn inconsistent_grid_is_a_config_error() {
    let mut c = tiny(1, "");
    c.out = Some(tempfile::tempdir().unwrap().path().to_path_buf());
    c.ablation = Some(AblationGrid {
        sizes: vec![8],
        modes: vec![ModeName::None],
        ..Default::default()
    });
    assert_eq!(harness::run_ablation(&c).unwrap_err().category(), "config");
}

fn write_directory_dataset(root: &Path, tag: &str, labels: &[&str]) {
    let mut csv = String::from("path,label,technique\n");
    let mut dirs = Vec::new();
    for (k, label) in labels.iter().enumerate() {
        let sub = if *label == "real" { "real" } else { tag };
        fs::create_dir_all(root.join(sub)).unwrap();
        let img = Image::from_fn(3, 16, 16, |(c, r, q)| ((r * 16 + q) * (c + 1) * (k + 3) % 251) as u8).unwrap();
        img.save_png(&root.join(sub).join(format!("{k}.png"))).unwrap();
        if !dirs.contains(&sub) {
            dirs.push(sub);
            csv += &format!("{sub},{label},{sub}\n");
        }
    }
    fs::write(root.join("manifest.csv"), csv).unwrap();
}

#[test]
fn single_group_visualization_emits_unit_correlation_and_clips_frames() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = (dir.path().join("train"), dir.path().join("test"));
    write_directory_dataset(&train, "only", &["real", "fake", "real", "fake"]);
    write_directory_dataset(&test, "only", &["fake", "fake", "fake"]);
    let text = format!(
        "seed = 1\nout = {:?}\n[dataset]\nkind = \"directory\"\nroot = {:?}\nmanifest = {:?}\ntest_root = {:?}\ntest_manifest = {:?}\n\
         [preprocess]\nresize = [16, 16]\ncrop = [16, 16]\nflip_probability = 0.0\n\
         [architecture]\nkind = \"reference-cnn\"\nin_channels = 3\nwidths = [4]\nstrides = [2]\n\
         [train]\niterations = 2\nbatch_size = 2\n\
         [visualize]\nframe_counts = [2, 50]\n",
        dir.path().join("out"),
        train,
        train.join("manifest.csv"),
        test,
        test.join("manifest.csv"),
    );
    let c = ExperimentConfig::from_toml(&text).unwrap();
    harness::run_training(&c).unwrap();
    let files = harness::run_visualization(&c, None).unwrap();
    let csv = fs::read_to_string(dir.path().join("out/visualize/correlation.csv")).unwrap();
    assert_eq!(csv, "technique,only\nonly,1.000000000000\n");
    // 50 frames requested, 3 available: clipped, still written.
    assert!(files.contains(&"visualize/frames/avg-0002.npy".to_string()));
    assert!(files.contains(&"visualize/frames/avg-0003.npy".to_string()));
    assert!(files.contains(&"visualize/cam/fake.png".to_string()));
    let m = RunManifest::load(&dir.path().join("out")).unwrap();
    assert!(m.verify(&dir.path().join("out")).is_empty());
}

#[test]
fn orthogonal_maps_give_zero_off_diagonal_in_emitted_table() {
    let mut a = ndarray::Array2::zeros((4, 4));
    let mut b = ndarray::Array2::zeros((4, 4));
    a.slice_mut(ndarray::s![..2, ..]).fill(1.0);
    b.slice_mut(ndarray::s![2.., ..]).fill(1.0);
    let maps = vec![
        ("top".to_string(), ForgeryAttentionMap::new(a, "planted").unwrap()),
        ("bottom".to_string(), ForgeryAttentionMap::new(b, "planted").unwrap()),
    ];
    let csv = saliency::fam_correlation_matrix(&maps).unwrap().to_csv();
    let rows: Vec<Vec<String>> = csv::Reader::from_reader(csv.as_bytes())
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    assert_eq!(rows[0][2].parse::<f64>().unwrap(), 0.0);
    assert_eq!(rows[1][1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn erase_preview_writes_pairs_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(8, RFM);
    c.out = Some(dir.path().to_path_buf());
    c.visualize.preview_count = 2;
    let files = harness::run_erase_preview(&c, None).unwrap();
    assert!(files.iter().any(|f| f.ends_with("-erased.png")));
    assert!(files.iter().any(|f| f.ends_with("-fam.png")));
    let records: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("preview/records.json")).unwrap()).unwrap();
    assert_eq!(records.as_array().unwrap().len(), 2);
    assert_eq!(records[1]["augmentation"]["kind"], "erased");
}

#[test]
fn evaluation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(1, "");
    c.out = Some(dir.path().to_path_buf());
    let e = harness::run_evaluation(&c, Some(&dir.path().join("none.ckpt"))).unwrap_err();
    assert_eq!(e.category(), "missing-checkpoint");
    fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    let e = harness::run_evaluation(&c, Some(&dir.path().join("bad.ckpt"))).unwrap_err();
    assert_eq!(e.category(), "checkpoint");
    let det = harness::init_detector(&c).unwrap();
    let e = harness::evaluate_set(&c, det.as_ref(), "empty", &[], false).unwrap_err();
    assert_eq!(e.category(), "empty-dataset");
}

#[test]
fn checkpoint_round_trip_preserves_scores() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(9, RFM);
    c.out = Some(dir.path().to_path_buf());
    harness::run_training(&c).unwrap();
    let det = detector::load_checkpoint(&dir.path().join(harness::FINAL_CHECKPOINT)).unwrap();
    let sets = harness::load_datasets(&c).unwrap();
    let direct = harness::evaluate_detector(&c, det.as_ref(), &sets.test).unwrap();
    assert_eq!(harness::run_evaluation(&c, None).unwrap(), direct);
    assert_eq!(direct.iter().filter(|r| r.test_set == harness::less_forgery_set_name(Region::Mouth)).count(), 1);
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let c = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        c.validate().unwrap();
        if let Some(grid) = &c.ablation {
            harness::expand_grid(&c, grid).unwrap();
        }
        n += 1;
    }
    assert!(n >= 3);
}
