//! Synthetic fixtures: an exactly proportioned skeleton and a toy activation
//! dataset whose concept is linearly readable from one channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::maskgen::BinaryMask;
use crate::skeleton::{kp, Keypoint, PersonAnnotation};
use crate::tensors::Tensor;

/// Which parts of the synthetic skeleton to keep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonSelection {
    pub keypoints: Vec<usize>,
    pub bbox: bool,
}

impl SkeletonSelection {
    pub fn everything() -> Self {
        Self {
            keypoints: (0..17).collect(),
            bbox: true,
        }
    }

    /// Body keypoints and bbox, no head. Every height path in this selection
    /// is consistent with the standard height.
    pub fn body() -> Self {
        Self {
            keypoints: (kp::LEFT_SHOULDER..=kp::RIGHT_ANKLE).collect(),
            bbox: true,
        }
    }

    /// Minimal selections that each enable one estimation path.
    pub fn single_paths() -> Vec<(&'static str, SkeletonSelection)> {
        let sel = |keypoints: &[usize]| SkeletonSelection {
            keypoints: keypoints.to_vec(),
            bbox: false,
        };
        vec![
            ("lower_leg", sel(&[kp::LEFT_KNEE, kp::LEFT_ANKLE])),
            ("upper_leg", sel(&[kp::LEFT_HIP, kp::LEFT_KNEE])),
            ("leg", sel(&[kp::LEFT_HIP, kp::LEFT_KNEE, kp::LEFT_ANKLE])),
            ("hip_to_shoulder", sel(&[kp::RIGHT_HIP, kp::RIGHT_SHOULDER])),
            ("upper_arm", sel(&[kp::LEFT_SHOULDER, kp::LEFT_ELBOW])),
            ("lower_arm", sel(&[kp::RIGHT_ELBOW, kp::RIGHT_WRIST])),
            (
                "body_height_arm_span",
                sel(&[kp::LEFT_SHOULDER, kp::RIGHT_SHOULDER, kp::RIGHT_ELBOW, kp::RIGHT_WRIST]),
            ),
            ("head_width_ears", sel(&[kp::LEFT_EAR, kp::RIGHT_EAR])),
            ("head_width_eyes", sel(&[kp::LEFT_EYE, kp::RIGHT_EYE])),
            ("head_depth_ear_eye", sel(&[kp::LEFT_EAR, kp::LEFT_EYE])),
            ("head_depth_ear_nose", sel(&[kp::RIGHT_EAR, kp::NOSE])),
            ("bbox", SkeletonSelection { keypoints: vec![], bbox: true }),
        ]
    }
}

/// Keypoint positions in meters (x right, y up, feet at y = 0) of a standing
/// person whose link lengths follow the height relations exactly.
pub fn proportional_pose(height_m: f64) -> [(f64, f64); 17] {
    let h = height_m;
    let lower_leg = (h - 0.501) / 3.075;
    let upper_leg = (h - 0.405) / 2.77;
    let hip_to_shoulder = h / 2.4;
    let upper_arm = (h - 0.449) / 3.72;
    let lower_arm = (h - 0.569) / 4.46;
    let shoulder_width = h / 1.1 - upper_arm - lower_arm;
    let head_height = h / 7.0;
    let head_width = head_height / 1.1;
    let eye_to_eye = head_width / 2.5;
    let head_depth = head_height * 7.0 / 8.0;
    let ear_to_eye = head_depth / 2.0;
    let ear_to_nose = head_depth * 4.0 / 7.0;

    let hip_x = 0.15;
    let shoulder_x = shoulder_width / 2.0;
    let knee_y = lower_leg;
    let hip_y = knee_y + upper_leg;
    let shoulder_y = hip_y + (hip_to_shoulder.powi(2) - (shoulder_x - hip_x).powi(2)).sqrt();
    let elbow_y = shoulder_y - upper_arm;
    let wrist_y = elbow_y - lower_arm;
    let ear_x = head_width / 2.0;
    let eye_x = eye_to_eye / 2.0;
    let ear_y = shoulder_y + 0.2;
    let eye_y = ear_y + (ear_to_eye.powi(2) - (ear_x - eye_x).powi(2)).sqrt();
    let nose_y = ear_y - (ear_to_nose.powi(2) - ear_x.powi(2)).sqrt();

    let mut p = [(0.0, 0.0); 17];
    p[kp::NOSE] = (0.0, nose_y);
    let sided = |left: usize, x: f64, y: f64, p: &mut [(f64, f64); 17]| {
        // COCO left is the person's left, which faces the camera on image right.
        p[left] = (x, y);
        p[left + 1] = (-x, y);
    };
    sided(kp::LEFT_EYE, eye_x, eye_y, &mut p);
    sided(kp::LEFT_EAR, ear_x, ear_y, &mut p);
    sided(kp::LEFT_SHOULDER, shoulder_x, shoulder_y, &mut p);
    sided(kp::LEFT_ELBOW, shoulder_x, elbow_y, &mut p);
    sided(kp::LEFT_WRIST, shoulder_x, wrist_y, &mut p);
    sided(kp::LEFT_HIP, hip_x, hip_y, &mut p);
    sided(kp::LEFT_KNEE, hip_x, knee_y, &mut p);
    sided(kp::LEFT_ANKLE, hip_x, 0.0, &mut p);
    p
}

/// Projects [`proportional_pose`] at `px_per_m` into a 400×400 image, keeping
/// only the selected keypoints. The bbox spans exactly the standard height.
pub fn proportional_skeleton(
    px_per_m: f64,
    height_m: f64,
    selection: &SkeletonSelection,
) -> PersonAnnotation {
    let side = 400u32;
    let cx = f64::from(side) / 2.0;
    let ground = (f64::from(side) + px_per_m * height_m) / 2.0;
    let pose = proportional_pose(height_m);
    let mut ann = PersonAnnotation::empty("synthetic", side, side);
    ann.id = Some("synthetic-0".into());
    for &i in &selection.keypoints {
        let (x, y) = pose[i];
        ann.keypoints[i] = Keypoint::visible(cx + px_per_m * x, ground - px_per_m * y);
    }
    if selection.bbox {
        let half_w = pose[kp::LEFT_SHOULDER].0 + 0.05;
        ann.bbox = Some([
            cx - px_per_m * half_w,
            ground - px_per_m * height_m,
            2.0 * px_per_m * half_w,
            px_per_m * height_m,
        ]);
    }
    ann
}

/// One sample of the toy activation dataset.
#[derive(Debug, Clone)]
pub struct DiskSample {
    pub id: String,
    pub activation: Tensor,
    pub mask: BinaryMask,
}

/// Parameters of the toy activation dataset.
#[derive(Debug, Clone)]
pub struct DiskFixture {
    pub samples: usize,
    pub channels: usize,
    pub grid: usize,
    /// Mask pixels per activation cell along each axis.
    pub upscale: usize,
    pub signal_channel: usize,
    pub noise_sigma: f32,
    pub radius_range: (f64, f64),
    pub seed: u64,
}

impl Default for DiskFixture {
    fn default() -> Self {
        Self {
            samples: 64,
            channels: 8,
            grid: 13,
            upscale: 4,
            signal_channel: 2,
            noise_sigma: 0.1,
            radius_range: (10.0, 18.0),
            seed: 7,
        }
    }
}

impl DiskFixture {
    pub fn mask_side(&self) -> usize {
        self.grid * self.upscale
    }

    /// Disk masks at mask resolution; the signal channel holds each mask
    /// average-pooled to the activation grid plus Gaussian noise, every other
    /// channel holds noise only.
    pub fn generate(&self) -> Vec<DiskSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0f32, self.noise_sigma).expect("sigma is finite");
        let side = self.mask_side();
        let (g, up) = (self.grid, self.upscale);
        (0..self.samples)
            .map(|i| {
                let r = rng.random_range(self.radius_range.0..self.radius_range.1);
                let cx = rng.random_range(r..side as f64 - r);
                let cy = rng.random_range(r..side as f64 - r);
                let mut mask = BinaryMask::new(side, side);
                for y in 0..side {
                    for x in 0..side {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if dx * dx + dy * dy <= r * r {
                            mask.set(x, y, true);
                        }
                    }
                }
                let mut data: Vec<f32> = (0..self.channels * g * g)
                    .map(|_| noise.sample(&mut rng))
                    .collect();
                let base = self.signal_channel * g * g;
                for cy in 0..g {
                    for cx in 0..g {
                        let mut on = 0usize;
                        for y in cy * up..(cy + 1) * up {
                            for x in cx * up..(cx + 1) * up {
                                on += usize::from(mask.get(x, y));
                            }
                        }
                        data[base + cy * g + cx] += on as f32 / (up * up) as f32;
                    }
                }
                DiskSample {
                    id: format!("disk{i:03}"),
                    activation: Tensor::new(vec![self.channels, g, g], data)
                        .expect("generated values are finite"),
                    mask,
                }
            })
            .collect()
    }
}
