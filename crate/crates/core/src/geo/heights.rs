use super::{Building, HeightRaster, HeightSource};

/// Height assigned when neither an annotation nor raster coverage exists.
pub const DEFAULT_BUILDING_HEIGHT_M: f64 = 8.0;

fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Sets the height of every non-annotated building to the median of the raster
/// cells whose centers fall inside the footprint's bounding box.
pub fn calibrate_heights(buildings: &[Building], raster: Option<&HeightRaster>) -> Vec<Building> {
    buildings
        .iter()
        .map(|b| {
            if b.height_source == HeightSource::Annotated {
                return b.clone();
            }
            let covered = raster.and_then(|r| median(r.values_in(&b.bounds())).filter(|h| *h > 0.0));
            match covered {
                Some(h) => b.with_height(h, HeightSource::Calibrated),
                None => b.with_height(DEFAULT_BUILDING_HEIGHT_M, HeightSource::Default),
            }
        })
        .collect()
}
