use rand::Rng;

/// Translates each plane by `(dy, dx)` replicating edge pixels, then scales
/// every value by `factor`.
pub fn shift_and_scale(obs: &[f32], shape: [usize; 3], dy: isize, dx: isize, factor: f32) -> Vec<f32> {
    let [c, h, w] = shape;
    assert_eq!(obs.len(), c * h * w);
    let mut out = vec![0.0; obs.len()];
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for ch in 0..c {
        let plane = &obs[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = clampi(y as isize - dy, h);
            for x in 0..w {
                let sx = clampi(x as isize - dx, w);
                out[ch * h * w + y * w + x] = plane[sy * w + sx] * factor;
            }
        }
    }
    out
}

/// Random shift of up to `max_shift` pixels per axis and an intensity factor
/// in `[1 − intensity, 1 + intensity]`, shared by all stacked planes.
pub fn data_augment<R: Rng>(obs: &[f32], shape: [usize; 3], max_shift: usize, intensity: f64, rng: &mut R) -> Vec<f32> {
    let m = max_shift as i64;
    let dy = rng.random_range(-m..=m) as isize;
    let dx = rng.random_range(-m..=m) as isize;
    let factor = if intensity > 0.0 {
        1.0 + rng.random_range(-intensity..=intensity)
    } else {
        1.0
    };
    shift_and_scale(obs, shape, dy, dx, factor as f32)
}
