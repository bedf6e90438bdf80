use crate::synth::{Color, ImageLatent, Quadrant, SceneSpec, Shape, CHANNELS, IMAGE_SIZE};

const QUAD: usize = IMAGE_SIZE / 2;
const FOREGROUND: f32 = 0.5;

/// Rule-based scene reader: the quadrant holding the most foreground pixels, the palette
/// color nearest their mean, and the shape template with the fewest mismatched pixels.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleClassifier;

impl OracleClassifier {
    /// `None` for an image without foreground.
    pub fn classify(&self, img: &ImageLatent) -> Option<SceneSpec> {
        let fg = |y: usize, x: usize| (0..CHANNELS).any(|c| img.get(c, y, x).abs() >= FOREGROUND);
        let counts = Quadrant::ALL.map(|q| {
            let (oy, ox) = q.origin();
            (0..QUAD * QUAD).filter(|&i| fg(oy + i / QUAD, ox + i % QUAD)).count()
        });
        let qi = (0..4).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
        if counts[qi] == 0 {
            return None;
        }
        let quadrant = Quadrant::ALL[qi];
        let (oy, ox) = quadrant.origin();
        let mut mask = [false; QUAD * QUAD];
        let mut mean = [0.0f32; CHANNELS];
        for (i, m) in mask.iter_mut().enumerate() {
            let (y, x) = (oy + i / QUAD, ox + i % QUAD);
            if fg(y, x) {
                *m = true;
                for (c, acc) in mean.iter_mut().enumerate() {
                    *acc += img.get(c, y, x);
                }
            }
        }
        mean.iter_mut().for_each(|v| *v /= counts[qi] as f32);
        let color = *Color::ALL
            .iter()
            .min_by(|a, b| dist(&a.rgb(), &mean).total_cmp(&dist(&b.rgb(), &mean)))
            .expect("palette is non-empty");
        let shape = *Shape::ALL
            .iter()
            .min_by_key(|s| s.mask().iter().zip(&mask).filter(|(a, b)| a != b).count())
            .expect("shapes are non-empty");
        Some(SceneSpec::new(shape, color, quadrant))
    }
}

fn dist(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::render_scene;

    #[test]
    fn exact_on_every_rendered_scene() {
        for s in SceneSpec::all() {
            assert_eq!(OracleClassifier.classify(&render_scene(&s)), Some(s));
        }
    }

    #[test]
    fn blank_image_is_unreadable() {
        assert_eq!(OracleClassifier.classify(&ImageLatent::blank()), None);
    }
}
