use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::sequence::{Joint, SkeletonSequence, Split};

/// Deterministic per-item RNG stream keyed by `(seed, salt, key)`.
///
/// Streams depend only on their key, so processing order never changes what a
/// sequence sees.
pub fn sequence_rng(seed: u64, salt: u64, key: &str) -> ChaCha8Rng {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for b in key.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    let mut mixed = seed ^ h.rotate_left(17) ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // splitmix64 finalizer
    mixed = (mixed ^ (mixed >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    mixed = (mixed ^ (mixed >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    mixed ^= mixed >> 31;
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Subtracts the first-frame position of `ref_joint` from every joint.
pub fn translate_to_reference(seq: &SkeletonSequence, ref_joint: usize) -> Result<SkeletonSequence> {
    let Some(first) = seq.frames.first() else {
        return Err(Error::Data(format!("sequence {:?} has no frames", seq.id)));
    };
    let Some(&origin) = first.get(ref_joint) else {
        return Err(Error::Config(format!(
            "reference joint {ref_joint} out of range for {} joints",
            first.len()
        )));
    };
    let mut out = seq.clone();
    for p in out.frames.iter_mut().flatten() {
        for c in 0..3 {
            p[c] -= origin[c];
        }
    }
    Ok(out)
}

/// A raw recording with `P` skeletons per frame: `frames[t][p][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPersonSequence {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub frames: Vec<Vec<Vec<Joint>>>,
}

/// Splits a multi-person recording into single-person sequences.
///
/// Tracks that are zero in every frame are dropped. With a single person the
/// recording is returned as is; otherwise each track gets id `"{id}#p{p}"`,
/// `person_id = p` and `source_id = id`.
pub fn split_multi_person(rec: &MultiPersonSequence) -> Result<Vec<SkeletonSequence>> {
    let persons = rec.frames.first().map_or(0, |f| f.len());
    if persons == 0 {
        return Err(Error::Data(format!("recording {:?} has no skeletons", rec.id)));
    }
    if rec.frames.iter().any(|f| f.len() != persons) {
        return Err(Error::Schema(format!(
            "recording {:?} has a varying person count",
            rec.id
        )));
    }
    let track = |p: usize| -> Vec<Vec<Joint>> { rec.frames.iter().map(|f| f[p].clone()).collect() };
    if persons == 1 {
        return Ok(vec![SkeletonSequence::new(rec.id.clone(), rec.label, rec.split, track(0))]);
    }
    let mut out = Vec::new();
    for p in 0..persons {
        let frames = track(p);
        if frames.iter().flatten().flatten().all(|&v| v == 0.0) {
            continue;
        }
        out.push(SkeletonSequence {
            id: format!("{}#p{p}", rec.id),
            source_id: rec.id.clone(),
            person_id: Some(p as u32),
            label: rec.label,
            split: rec.split,
            frames,
        });
    }
    Ok(out)
}

/// Frame indices picked by clip sampling.
///
/// The `t_raw` indices (each repeated `ceil(t/t_raw)` times when the sequence
/// is shorter than `t`) are cut into `t` contiguous windows whose sizes differ
/// by at most one, and one index is drawn uniformly from each window.
pub fn clip_indices<R: Rng + ?Sized>(t_raw: usize, t: usize, rng: &mut R) -> Vec<usize> {
    assert!(t_raw >= 1 && t >= 1, "clip sampling needs nonempty input and output");
    let repeat = t.div_ceil(t_raw);
    let n = t_raw * repeat;
    (0..t)
        .map(|i| {
            let lo = i * n / t;
            let hi = (i + 1) * n / t;
            let pick = if hi - lo > 1 { rng.random_range(lo..hi) } else { lo };
            pick / repeat
        })
        .collect()
}

pub fn sample_clips<R: Rng + ?Sized>(seq: &SkeletonSequence, t: usize, rng: &mut R) -> Result<SkeletonSequence> {
    if t == 0 {
        return Err(Error::Config("clip count must be at least 1".into()));
    }
    if seq.frames.is_empty() {
        return Err(Error::Data(format!("sequence {:?} has no frames", seq.id)));
    }
    let idx = clip_indices(seq.frames.len(), t, rng);
    let mut out = seq.clone();
    out.frames = idx.iter().map(|&i| seq.frames[i].clone()).collect();
    Ok(out)
}

/// `R = Rz(az) · Ry(ay) · Rx(ax)`, angles in radians.
pub fn rotation_matrix(ax: f64, ay: f64, az: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mat3_mul(&mat3_mul(&rz, &ry), &rx)
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|l| a[i][l] * b[l][j]).sum();
        }
    }
    c
}

/// Rotates every joint about the origin by the given per-axis angles (radians).
pub fn rotate_sequence(seq: &SkeletonSequence, angles: [f64; 3]) -> SkeletonSequence {
    let r = rotation_matrix(angles[0], angles[1], angles[2]);
    let mut out = seq.clone();
    for p in out.frames.iter_mut().flatten() {
        let q = *p;
        for (i, row) in r.iter().enumerate() {
            p[i] = row[0] * q[0] + row[1] * q[1] + row[2] * q[2];
        }
    }
    out
}

/// Draws one angle per axis uniformly from `[-max, max]` degrees and rotates
/// the whole sequence with it.
pub fn random_rotation_augment<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    max_degrees: [f64; 3],
    rng: &mut R,
) -> Result<SkeletonSequence> {
    if max_degrees.iter().any(|&d| d < 0.0 || !d.is_finite()) {
        return Err(Error::Config(format!("rotation range must be finite and >= 0, got {max_degrees:?}")));
    }
    let mut angles = [0.0; 3];
    for (a, &m) in angles.iter_mut().zip(&max_degrees) {
        if m > 0.0 {
            *a = rng.random_range(-m..=m).to_radians();
        }
    }
    Ok(rotate_sequence(seq, angles))
}

/// Clip-sample, optionally rotate, then translate: the per-sequence input
/// pipeline shared by training and evaluation.
pub fn prepare_clip<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    frames: usize,
    ref_joint: usize,
    rotation_degrees: Option<[f64; 3]>,
    rng: &mut R,
) -> Result<SkeletonSequence> {
    let mut clip = sample_clips(seq, frames, rng)?;
    if let Some(max) = rotation_degrees {
        clip = random_rotation_augment(&clip, max, rng)?;
    }
    translate_to_reference(&clip, ref_joint)
}

/// `[T, J, 3]` tensor of a sequence's positions.
pub fn sequence_to_tensor<S: Scalar>(seq: &SkeletonSequence) -> Result<Tensor<S>> {
    let t = seq.frames.len();
    let j = seq.num_joints();
    if seq.frames.iter().any(|f| f.len() != j) {
        return Err(Error::Schema(format!("sequence {:?} has ragged frames", seq.id)));
    }
    let data = seq.frames.iter().flatten().flatten().map(|&v| S::of(v)).collect();
    Tensor::new(vec![t, j, 3], data)
}

/// `[B, T, J, 3]` tensor of equally sized sequences.
pub fn batch_to_tensor<S: Scalar>(clips: &[SkeletonSequence]) -> Result<Tensor<S>> {
    let Some(first) = clips.first() else {
        return dim_err("cannot batch zero sequences");
    };
    let (t, j) = (first.num_frames(), first.num_joints());
    let mut data = Vec::with_capacity(clips.len() * t * j * 3);
    for c in clips {
        if c.num_frames() != t || c.frames.iter().any(|f| f.len() != j) {
            return dim_err(format!("sequence {:?} does not match batch shape [{t}, {j}]", c.id));
        }
        data.extend(c.frames.iter().flatten().flatten().map(|&v| S::of(v)));
    }
    Tensor::new(vec![clips.len(), t, j, 3], data)
}

/// Backward differences along the frame axis of `[.., T, J, 3]` positions,
/// with the first frame's velocity set to zero.
pub fn compute_velocity<S: Scalar>(positions: &Tensor<S>) -> Result<Tensor<S>> {
    let shape = positions.shape();
    let r = shape.len();
    if r < 3 || shape[r - 1] != 3 {
        return dim_err(format!("velocity expects [.., T, J, 3] positions, got {shape:?}"));
    }
    let t = shape[r - 3];
    let frame = shape[r - 2] * 3;
    let block = t * frame;
    let p = positions.data();
    let mut v = vec![S::zero(); p.len()];
    for b in 0..p.len() / block.max(1) {
        let base = b * block;
        for i in frame..block {
            v[base + i] = p[base + i] - p[base + i - frame];
        }
    }
    Tensor::new(shape.to_vec(), v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn seq(frames: Vec<Vec<Joint>>) -> SkeletonSequence {
        SkeletonSequence::new("s", 0, Split::Train, frames)
    }

    #[test]
    fn clip_windows_of_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let idx = clip_indices(100, 20, &mut rng);
            assert_eq!(idx.len(), 20);
            for (i, &k) in idx.iter().enumerate() {
                assert!((5 * i..5 * i + 5).contains(&k));
            }
        }
    }

    #[test]
    fn equal_length_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(clip_indices(20, 20, &mut rng), (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn short_sequences_repeat_each_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = clip_indices(10, 20, &mut rng);
        let expect: Vec<usize> = (0..10).flat_map(|i| [i, i]).collect();
        assert_eq!(idx, expect);
    }

    #[test]
    fn quarter_turn_about_z() {
        let s = seq(vec![vec![[1.0, 0.0, 0.0]]]);
        let r = rotate_sequence(&s, [0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let p = r.frames[0][0];
        assert!((p[0]).abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15 && p[2].abs() < 1e-15);
    }

    #[test]
    fn zero_range_rotation_is_identity() {
        let s = seq(vec![vec![[0.3, -1.2, 2.0], [4.0, 5.0, 6.0]]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_rotation_augment(&s, [0.0; 3], &mut rng).unwrap(), s);
    }

    #[test]
    fn rotation_order_is_z_y_x() {
        let (ax, ay, az) = (0.3, -0.7, 1.1);
        let r = rotation_matrix(ax, ay, az);
        // Rx first: apply to e_y, then Ry, then Rz.
        let s = seq(vec![vec![[0.0, 1.0, 0.0]]]);
        let step = rotate_sequence(&rotate_sequence(&rotate_sequence(&s, [ax, 0.0, 0.0]), [0.0, ay, 0.0]), [0.0, 0.0, az]);
        for (got, row) in step.frames[0][0].iter().zip(&r) {
            assert!((got - row[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn velocity_of_linear_motion() {
        let frames: Vec<Vec<Joint>> = (0..4).map(|t| vec![[t as f64, 0.0, 0.0]]).collect();
        let p = sequence_to_tensor::<f64>(&seq(frames)).unwrap();
        let v = compute_velocity(&p).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn velocity_single_frame_is_zero() {
        let p = Tensor::<f64>::from_f64(vec![1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!(compute_velocity(&p).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn translation_zeroes_first_reference() {
        let s = seq(vec![vec![[1.0, 2.0, 3.0], [2.0, 2.0, 2.0]], vec![[0.0, 0.0, 0.0], [5.0, 5.0, 5.0]]]);
        let out = translate_to_reference(&s, 0).unwrap();
        assert_eq!(out.frames[0][0], [0.0, 0.0, 0.0]);
        assert_eq!(out.frames[1][1], [4.0, 3.0, 2.0]);
        assert!(translate_to_reference(&s, 2).is_err());
    }

    #[test]
    fn sequence_streams_are_keyed() {
        let a: u64 = sequence_rng(1, 0, "x").random();
        let b: u64 = sequence_rng(1, 0, "x").random();
        let c: u64 = sequence_rng(1, 0, "y").random();
        let d: u64 = sequence_rng(1, 1, "x").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
