//! Reads a SemanticKITTI-layout sequence and prints a summary of every
//! `stride`-th frame.
//!
//! ```text
//! cargo run --example read_kitti -- <dataset_root> [sequence] [stride]
//! ```
//!
//! Without arguments a small sequence is written to a temporary directory
//! first, so the example runs anywhere.

use std::collections::BTreeMap;

use stela::kitti_io::{
    build_tiny_subset, read_labels, read_scan, write_sequence, ClassMap, LabelArray, SequenceManifest,
};
use stela::synthetic::{motion_ambiguous_scenes, MotionSceneSpec, CLASS_NAMES};

fn main() -> stela::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let tmp;
    let (root, sequence, stride, classes) = match args.as_slice() {
        [root, rest @ ..] => (
            std::path::PathBuf::from(root),
            rest.first().cloned().unwrap_or_else(|| "00".into()),
            rest.get(1).and_then(|s| s.parse().ok()).unwrap_or(10),
            ClassMap::semantic_kitti(),
        ),
        [] => {
            tmp = tempfile::tempdir().expect("temporary directory");
            let spec = MotionSceneSpec {
                frames: 25,
                ..Default::default()
            };
            let seq = &motion_ambiguous_scenes(&spec, 1, 0)?[0];
            let scans: Vec<_> = seq.iter().map(|f| f.scan.clone()).collect();
            let labels: Vec<_> = seq
                .iter()
                .map(|f| LabelArray {
                    semantic: f.labels.clone(),
                    instance: vec![0; f.labels.len()],
                })
                .collect();
            let poses: Vec<_> = seq.iter().map(|f| f.pose).collect();
            write_sequence(tmp.path(), "00", &scans, &labels, &poses)?;
            let map: String = CLASS_NAMES
                .iter()
                .enumerate()
                .map(|(i, n)| format!("{i} {i} {n}\n"))
                .collect();
            (tmp.path().to_path_buf(), "00".to_string(), 10, ClassMap::parse(&map)?)
        }
    };

    let manifest = build_tiny_subset(&SequenceManifest::discover(&root, &sequence)?, stride)?;
    println!("sequence {sequence}: frames {:?}", manifest.frame_ids);
    for i in 0..manifest.len() {
        let scan = read_scan(&manifest.scan_paths[i])?;
        let t = manifest.poses[i].translation();
        print!(
            "frame {:06}: {} points, pose t = ({:.2}, {:.2}, {:.2})",
            manifest.frame_ids[i],
            scan.len(),
            t[0],
            t[1],
            t[2]
        );
        if let Some(path) = manifest.label_paths.get(i) {
            let labels = read_labels(path, scan.len())?;
            let mut hist: BTreeMap<u16, usize> = BTreeMap::new();
            for id in classes.remap_all(&labels) {
                *hist.entry(id).or_default() += 1;
            }
            print!(", train ids {hist:?}");
        }
        println!();
    }
    Ok(())
}
