use alloc::vec::Vec;

use super::keypoints::Keypoint;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DescriptorMatch {
    pub query: usize,
    pub train: usize,
    pub distance: f32,
}

fn distance(a: &Keypoint, b: &Keypoint) -> f32 {
    libm::sqrt(
        a.descriptor
            .iter()
            .zip(&b.descriptor)
            .map(|(x, y)| {
                let d = (*x - *y) as f64;
                d * d
            })
            .sum::<f64>(),
    ) as f32
}

/// Nearest and second-nearest neighbour of `q` among `pool`.
fn two_nearest(q: &Keypoint, pool: &[Keypoint]) -> (usize, f32, f32) {
    let (mut best, mut d1, mut d2) = (0, f32::INFINITY, f32::INFINITY);
    for (i, p) in pool.iter().enumerate() {
        let d = distance(q, p);
        if d < d1 {
            d2 = d1;
            d1 = d;
            best = i;
        } else if d < d2 {
            d2 = d;
        }
    }
    (best, d1, d2)
}

/// Mutual nearest neighbours that also pass the distance-ratio test
/// `d1 < ratio * d2`. The mutual check does not depend on `ratio`, so a
/// larger ratio always returns a superset.
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint], ratio: f32) -> Vec<DescriptorMatch> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let back: Vec<usize> = b.iter().map(|kb| two_nearest(kb, a).0).collect();
    let mut out = Vec::new();
    for (qi, ka) in a.iter().enumerate() {
        let (ti, d1, d2) = two_nearest(ka, b);
        if back[ti] != qi {
            continue;
        }
        if d2.is_infinite() || d1 < ratio * d2 {
            out.push(DescriptorMatch { query: qi, train: ti, distance: d1 });
        }
    }
    out
}
