//! Byte-exactness of both pipelines on a fixed synthetic scene: a sphere
//! resting on a slanted plane with a ring of dropped measurements. The
//! expected fingerprints were recorded from the first verified run; any
//! platform- or refactor-induced byte change fails here.

use shiftbench_depthcolor::{colorize, DepthImage, Method, SnPlusConfig};

/// 48x48 scene, depths in millimeters. Deterministic arithmetic only.
fn sphere_on_plane() -> DepthImage {
    let (w, h) = (48usize, 48usize);
    let mut data = vec![0u16; w * h];
    for y in 0..h {
        for x in 0..w {
            // Plane sloping away from the camera.
            let plane = 900.0 + 6.0 * y as f64 + 2.0 * x as f64;
            // Sphere of radius 14 centered at (24, 20), bulging toward the
            // camera.
            let dx = x as f64 - 24.0;
            let dy = y as f64 - 20.0;
            let r2 = 14.0f64.powi(2) - dx * dx - dy * dy;
            let depth = if r2 > 0.0 { plane - 60.0 - r2.sqrt() * 4.0 } else { plane };
            // Ring of missing measurements around the contour, as depth
            // sensors produce at silhouette edges.
            let rim = (dx * dx + dy * dy).sqrt();
            data[y * w + x] = if (13.0..=15.5).contains(&rim) { 0 } else { depth as u16 };
        }
    }
    DepthImage::new(w, h, data).unwrap()
}

const EXPECT_SN: u64 = 0x51d78213f9b53036;
const EXPECT_SN_PLUS: u64 = 0x8a16ea4366bff06e;

#[test]
fn golden_scene_byte_exact() {
    let d = sphere_on_plane();
    let cfg = SnPlusConfig::default();
    let sn = colorize(&d, Method::Sn, &cfg).unwrap();
    let snp = colorize(&d, Method::SnPlus, &cfg).unwrap();
    assert_eq!(sn.fingerprint(), EXPECT_SN, "sn fingerprint {:#018x}", sn.fingerprint());
    assert_eq!(
        snp.fingerprint(),
        EXPECT_SN_PLUS,
        "sn_plus fingerprint {:#018x}",
        snp.fingerprint()
    );
}
