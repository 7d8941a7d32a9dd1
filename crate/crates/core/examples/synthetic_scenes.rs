//! Generates a twin pair of motion-ambiguous scenes and shows that their
//! last frames are identical while the labels of the objects differ.

use stela::geometry::align_to_frame;
use stela::synthetic::{motion_ambiguous_scenes, MotionSceneSpec, CLASS_NAMES, MOVING_OBJECT, STATIC_OBJECT};

fn main() -> stela::Result<()> {
    let spec = MotionSceneSpec::default();
    let scenes = motion_ambiguous_scenes(&spec, 1, 42)?;
    let (a, b) = (&scenes[0], &scenes[1]);
    let (la, lb) = (a.last().unwrap(), b.last().unwrap());
    println!("classes {CLASS_NAMES:?}, {} frames per sequence", a.len());
    println!("last frames identical: {}", la.scan == lb.scan);
    let swapped = la
        .labels
        .iter()
        .zip(&lb.labels)
        .filter(|(x, y)| x != y)
        .all(|(&x, &y)| (x, y) == (STATIC_OBJECT, MOVING_OBJECT) || (x, y) == (MOVING_OBJECT, STATIC_OBJECT));
    println!("differing labels are static/moving swaps: {swapped}");

    // aligned to the last frame, static points stay put while moving ones trail
    for (name, seq) in [("twin a", a), ("twin b", b)] {
        let last = seq.last().unwrap();
        let first = &seq[0];
        let aligned = align_to_frame(&first.scan, &first.pose, &last.pose);
        for class in [STATIC_OBJECT, MOVING_OBJECT] {
            let pts: Vec<usize> = (0..first.labels.len()).filter(|&i| first.labels[i] == class).collect();
            let shift: f64 = pts
                .iter()
                .map(|&i| {
                    let (p, q) = (aligned.points[i].xyz(), last.scan.points[i].xyz());
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
                })
                .sum::<f64>()
                / pts.len().max(1) as f64;
            println!(
                "{name}: {} {} points, mean displacement over the sequence {shift:.2} m",
                pts.len(),
                CLASS_NAMES[class as usize]
            );
        }
    }
    Ok(())
}
