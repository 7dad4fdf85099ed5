use super::{BoundingBox, Detection};

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f32 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Thresholds candidates by confidence, then greedily suppresses, per class,
/// every candidate overlapping an already kept one by more than
/// `iou_threshold`. Equal confidences are ordered by input position.
/// Survivors are returned by decreasing confidence with their provenance
/// untouched.
pub fn nms(candidates: &[Detection], conf_threshold: f32, iou_threshold: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].confidence >= conf_threshold)
        .collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .confidence
            .total_cmp(&candidates[a].confidence)
            .then(a.cmp(&b))
    });

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let c = &candidates[i];
        let suppressed = kept.iter().any(|&k| {
            let other = &candidates[k];
            other.class_id == c.class_id && iou(&other.bbox, &c.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| candidates[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Provenance;

    fn bx(x0: f32, y0: f32, x1: f32, y1: f32) -> BoundingBox {
        BoundingBox {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
        }
    }

    fn det(b: BoundingBox, conf: f32, class_id: usize) -> Detection {
        Detection {
            bbox: b,
            objectness: conf,
            class_id,
            class_prob: 1.0,
            confidence: conf,
            provenance: Provenance {
                head_index: 0,
                grid_y: 0,
                grid_x: 0,
                anchor_index: 0,
            },
        }
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(2.0, 2.0, 3.0, 3.0)), 0.0);
        let third = iou(&a, &bx(0.5, 0.0, 1.5, 1.0));
        assert!((third - 1.0 / 3.0).abs() < 1e-7);
        assert_eq!(iou(&bx(0.0, 0.0, 0.0, 0.0), &bx(0.0, 0.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn single_candidate_passes_through() {
        let d = det(bx(1.0, 1.0, 5.0, 5.0), 0.7, 2);
        assert_eq!(nms(std::slice::from_ref(&d), 0.5, 0.45), vec![d]);
    }

    #[test]
    fn duplicate_suppressed() {
        let b = bx(1.0, 1.0, 5.0, 5.0);
        let out = nms(&[det(b, 0.8, 0), det(b, 0.9, 0)], 0.5, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].confidence, 0.9);
    }

    #[test]
    fn classes_do_not_suppress_each_other() {
        let b = bx(1.0, 1.0, 5.0, 5.0);
        let out = nms(&[det(b, 0.8, 0), det(b, 0.9, 1), det(b, 0.4, 1)], 0.5, 0.5);
        assert_eq!(out.len(), 2);
    }
}
