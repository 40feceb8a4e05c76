//! Deriving classification samples and smaller tiles from segmentation
//! samples.

use super::record::{Labels, SitsRecord};
use crate::embedding::SitsTensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labels the whole series with the class at pixel `(H/2, W/2)`. Samples
/// whose center is `background` are dropped.
pub fn make_classification_sample(seg: &SitsRecord, background: u16) -> Result<Option<SitsRecord>> {
    let Labels::Pixels(labels) = &seg.labels else {
        return Err(Error::Data("expected a segmentation sample".into()));
    };
    let (_, h, w, _) = seg.sits.dims();
    let center = labels[(h / 2) * w + w / 2];
    if center == background {
        return Ok(None);
    }
    Ok(Some(SitsRecord {
        sits: seg.sits.clone(),
        labels: Labels::Class(center),
    }))
}

/// Non-overlapping `size×size` tiles in row-major tile order, each with all
/// acquisitions.
pub fn split_into_patches(seg: &SitsRecord, size: usize) -> Result<Vec<SitsRecord>> {
    let Labels::Pixels(labels) = &seg.labels else {
        return Err(Error::Data("expected a segmentation sample".into()));
    };
    let (t, h, w, c) = seg.sits.dims();
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(Error::Config(format!(
            "{h}x{w} grid is not divisible into {size}x{size} tiles"
        )));
    }
    let src = seg.sits.values().data();
    let mut out = Vec::with_capacity((h / size) * (w / size));
    for ty in 0..h / size {
        for tx in 0..w / size {
            let mut values = Vec::with_capacity(t * size * size * c);
            for ti in 0..t {
                for y in ty * size..(ty + 1) * size {
                    let row = ((ti * h + y) * w + tx * size) * c;
                    values.extend_from_slice(&src[row..row + size * c]);
                }
            }
            let tile_labels = (ty * size..(ty + 1) * size)
                .flat_map(|y| {
                    labels[y * w + tx * size..y * w + (tx + 1) * size]
                        .iter()
                        .copied()
                })
                .collect();
            let sits = SitsTensor::new(
                Tensor::new(&[t, size, size, c], values)?,
                seg.sits.dates().to_vec(),
            )?;
            out.push(SitsRecord {
                sits,
                labels: Labels::Pixels(tile_labels),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(h: usize, w: usize, labels: Vec<u16>) -> SitsRecord {
        let values = Tensor::from_fn(&[2, h, w, 3], |i| i as f32);
        SitsRecord::new(
            SitsTensor::new(values, vec![1, 5]).unwrap(),
            Labels::Pixels(labels),
        )
        .unwrap()
    }

    #[test]
    fn center_pixel_decides_the_class() {
        let mut labels = vec![9u16; 24 * 24];
        labels[12 * 24 + 12] = 5;
        let r = make_classification_sample(&seg(24, 24, labels), 9)
            .unwrap()
            .unwrap();
        assert_eq!(r.labels, Labels::Class(5));
    }

    #[test]
    fn background_center_is_discarded() {
        let mut labels = vec![1u16; 24 * 24];
        labels[12 * 24 + 12] = 9;
        assert_eq!(
            make_classification_sample(&seg(24, 24, labels), 9).unwrap(),
            None
        );
    }

    #[test]
    fn tiling_120_by_24_gives_25_tiles_that_reassemble() {
        let labels: Vec<u16> = (0..120 * 120).map(|i| (i % 7) as u16).collect();
        let parent = seg(120, 120, labels.clone());
        let tiles = split_into_patches(&parent, 24).unwrap();
        assert_eq!(tiles.len(), 25);
        let (t, h, w, c) = parent.sits.dims();
        for (n, tile) in tiles.iter().enumerate() {
            let (ty, tx) = (n / 5, n % 5);
            assert_eq!(tile.sits.dates(), parent.sits.dates());
            let Labels::Pixels(tl) = &tile.labels else {
                panic!()
            };
            for y in 0..24 {
                for x in 0..24 {
                    let (py, px) = (ty * 24 + y, tx * 24 + x);
                    assert_eq!(tl[y * 24 + x], labels[py * w + px]);
                    for ti in 0..t {
                        for ch in 0..c {
                            assert_eq!(
                                tile.sits.values().get(&[ti, y, x, ch]),
                                parent.sits.values().data()[((ti * h + py) * w + px) * c + ch]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn full_size_tile_is_identity() {
        let parent = seg(24, 24, vec![0; 576]);
        assert_eq!(split_into_patches(&parent, 24).unwrap(), vec![parent]);
    }

    #[test]
    fn indivisible_tiling_is_a_configuration_error() {
        assert!(matches!(
            split_into_patches(&seg(128, 128, vec![0; 128 * 128]), 24),
            Err(Error::Config(_))
        ));
    }
}
