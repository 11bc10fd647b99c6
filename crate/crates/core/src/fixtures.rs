//! Published 10-step schedules for latent and pixel image/video models, kept as
//! validation fixtures (descending sigmas).

pub const RELEASED_SCHEDULES: [(&str, [f64; 11]); 4] = [
    ("stable-diffusion-1.5", [14.615, 6.475, 3.861, 2.697, 1.886, 1.396, 0.963, 0.652, 0.399, 0.152, 0.029]),
    ("sdxl", [14.615, 6.315, 3.771, 2.181, 1.342, 0.862, 0.555, 0.380, 0.234, 0.113, 0.029]),
    ("deepfloyd-if-stage1", [160.41, 8.081, 3.315, 1.885, 1.207, 0.785, 0.553, 0.293, 0.186, 0.030, 0.006]),
    ("stable-video-diffusion", [700.00, 54.5, 15.886, 7.977, 4.248, 1.789, 0.981, 0.403, 0.173, 0.034, 0.002]),
];

pub fn released_schedules() -> Vec<crate::schedule::Schedule> {
    RELEASED_SCHEDULES
        .iter()
        .map(|(name, s)| {
            crate::schedule::Schedule::new(s.to_vec())
                .expect("released schedules are valid")
                .named(*name)
        })
        .collect()
}
