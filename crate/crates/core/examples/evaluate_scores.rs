// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mask IoU, composite ground truth, random-image baselines with 99%
//! intervals, and CLIP-style scores against file-backed embeddings.
//!
//! `cargo run --example evaluate_scores`

use lmm_sae::evaluate::clip_score;
use lmm_sae::evaluate::{composite_mask, iou, random_baseline, EmbeddingKind, EmbeddingRecord, FileEmbeddings};
use lmm_sae::mask::Mask;

fn square(w: usize, x0: usize, y0: usize, side: usize) -> Mask {
    let mut m = Mask::empty(w, w);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            m.set(x, y, true);
        }
    }
    m
}

fn main() -> lmm_sae::Result<()> {
    let act = square(8, 0, 0, 4);
    let left = square(8, 0, 0, 2);
    let right = square(8, 2, 2, 2);
    let truth = composite_mask(&[left, right])?.expect("two detections");
    println!("activation cells {}, ground-truth cells {}", act.count(), truth.count());
    println!("IoU {:.3}", iou(&act, &truth)?);
    println!("IoU with itself {:.3}", iou(&act, &act)?);

    let per_image = [0.9, 0.1, 0.4, 0.0, 0.7, 0.3, 0.2, 0.8, 0.5, 0.6];
    let stat = random_baseline(
        |imgs| Ok(imgs.iter().map(|&i| per_image[i]).sum::<f64>() / imgs.len() as f64),
        per_image.len(),
        3,
        30,
        7,
    )?;
    println!(
        "random baseline {:.3} +- {:.3} (99%, {} runs)",
        stat.mean, stat.ci99_half_width, stat.n_runs
    );

    let records = vec![
        EmbeddingRecord {
            kind: EmbeddingKind::Text,
            id: "red apple".into(),
            vector: vec![1.0, 0.0, 0.0],
        },
        EmbeddingRecord {
            kind: EmbeddingKind::Image,
            id: "img0".into(),
            vector: vec![0.9, 0.1, 0.0],
        },
        EmbeddingRecord {
            kind: EmbeddingKind::Image,
            id: "img1".into(),
            vector: vec![0.0, 1.0, 0.0],
        },
    ];
    let source = FileEmbeddings::from_records(records);
    println!("clip score on img0 {:.2}", clip_score("red apple", &["img0"], &source)?);
    println!(
        "clip score on img0+img1 {:.2}",
        clip_score("red apple", &["img0", "img1"], &source)?
    );
    Ok(())
}
