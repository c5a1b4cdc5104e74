//! TEMPORARY probe: conjugate symmetry of sampling masks. Deleted before release.

use covae::mri::{full_mask, make_cartesian_mask, make_radial_mask};

fn main() {
    for (name, mask) in [
        ("radial-7@16".to_string(), make_radial_mask(16, 16, 7).unwrap()),
        ("radial-5@32".to_string(), make_radial_mask(32, 32, 5).unwrap()),
        ("radial-15@32".to_string(), make_radial_mask(32, 32, 15).unwrap()),
        ("radial-25@32".to_string(), make_radial_mask(32, 32, 25).unwrap()),
        ("cartesian@32".to_string(), make_cartesian_mask(32, 32, 4, 0.3, 99).unwrap()),
        ("full@32".to_string(), full_mask(32, 32)),
    ] {
        let keep = mask.keep();
        let (h, w) = (mask.height(), mask.width());
        let mut asym = 0usize;
        for r in 0..h {
            for c in 0..w {
                if keep[(r, c)] && !keep[((h - r) % h, (w - c) % w)] {
                    asym += 1;
                }
            }
        }
        println!("{name}: kept {} asymmetric {asym}", mask.kept_count());
    }
}
