use super::FlowField;
use crate::error::{Error, Result};
use crate::media::Frame;

/// Exhaustive integer block matching.
///
/// For every `block × block` tile of `prev`, all displacements within
/// `±radius` are scored by mean absolute difference against `next`; the
/// winner is replicated over the tile. Ties go to the smallest displacement
/// magnitude, then the smallest `dy`, then the smallest `dx`. Only tiles whose
/// whole search range stays inside the frame are marked valid.
pub fn block_match_flow(prev: &Frame, next: &Frame, block: usize, radius: usize) -> Result<FlowField> {
    if block < 2 || radius < 1 {
        return Err(Error::InvalidParam(format!("block {block} / radius {radius}")));
    }
    if (prev.h, prev.w, prev.c) != (next.h, next.w, next.c) {
        return Err(Error::Shape(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            prev.h, prev.w, next.h, next.w
        )));
    }
    if prev.c != 1 {
        return Err(Error::Shape("block matching expects luma frames".into()));
    }
    let (h, w) = (prev.h, prev.w);
    let r = radius as isize;
    let mut candidates: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .collect();
    candidates.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));

    let mut flow = FlowField::zeros(h, w);
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let bh = block.min(h - by);
            let bw = block.min(w - bx);
            let mut best = (f64::INFINITY, (0isize, 0isize));
            for &(dx, dy) in &candidates {
                let mut sad = 0.0;
                let mut n = 0usize;
                for y in by..by + bh {
                    let ty = y as isize + dy;
                    if ty < 0 || ty >= h as isize {
                        continue;
                    }
                    for x in bx..bx + bw {
                        let tx = x as isize + dx;
                        if tx < 0 || tx >= w as isize {
                            continue;
                        }
                        sad += (prev.data[y * w + x] - next.data[ty as usize * w + tx as usize]).abs();
                        n += 1;
                    }
                }
                if n == 0 {
                    continue;
                }
                let score = sad / n as f64;
                // Strict comparison keeps the earliest candidate in tie-break order.
                if score < best.0 {
                    best = (score, (dx, dy));
                }
            }
            let interior = bh == block
                && bw == block
                && by >= radius
                && bx >= radius
                && by + block + radius <= h
                && bx + block + radius <= w;
            for y in by..by + bh {
                for x in bx..bx + bw {
                    flow.set(y, x, best.1 .0 as f64, best.1 .1 as f64);
                    flow.valid[y * w + x] = interior;
                }
            }
        }
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(h: usize, w: usize, sx: isize, sy: isize) -> Frame {
        // deterministic hash texture so every block has a unique best match
        let data = (0..h * w)
            .map(|i| {
                let y = (i / w) as isize - sy;
                let x = (i % w) as isize - sx;
                let k = (x.wrapping_mul(73_856_093) ^ y.wrapping_mul(19_349_663)) as u64;
                (k.wrapping_mul(2_654_435_761) % 1000) as f64 / 1000.0
            })
            .collect();
        Frame::new(h, w, 1, data)
    }

    #[test]
    fn identical_frames_zero() {
        let a = texture(24, 24, 0, 0);
        let f = block_match_flow(&a, &a, 4, 2).unwrap();
        assert!(f.vectors.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn integer_shift_exact_on_interior() {
        let a = texture(32, 32, 0, 0);
        let b = texture(32, 32, 2, 1);
        let f = block_match_flow(&a, &b, 4, 3).unwrap();
        let mut interior = 0;
        for y in 0..32 {
            for x in 0..32 {
                if f.valid[y * 32 + x] {
                    interior += 1;
                    assert_eq!(f.get(y, x), (2.0, 1.0));
                }
            }
        }
        assert!(interior > 0);
    }

    #[test]
    fn textureless_prefers_zero() {
        let a = Frame::filled(16, 16, 1, 0.4);
        let f = block_match_flow(&a, &a, 4, 2).unwrap();
        assert!(f.vectors.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_degenerate_params() {
        let a = Frame::filled(8, 8, 1, 0.0);
        assert!(block_match_flow(&a, &a, 1, 2).is_err());
        assert!(block_match_flow(&a, &a, 4, 0).is_err());
    }
}
