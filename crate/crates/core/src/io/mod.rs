//! File formats and run reports: the vraw container, a read-only NIfTI-1
//! subset, `metrics.json` and the CSV tables.

mod nifti;
mod report;
mod vraw;

use std::path::Path;

pub use nifti::{decode_nifti, encode_nifti_f32, parse_nifti_header, read_nifti, NiftiHeader, NIFTI_HEADER_LEN};
pub use report::{
    read_metrics_json, read_sweep_csv, write_metrics_json, write_sweep_csv, write_trace_csv, MetricsFile,
};
pub use vraw::{
    decode_vraw, encode_vraw, read_field, read_vraw, write_field, write_labels_vraw, write_vraw,
    write_volume_vraw, Dtype, VrawFile, VrawHeader, VRAW_LAYOUT, VRAW_MAGIC,
};

use crate::error::Result;
use crate::grid::{LabelMap, Volume};

fn is_nifti(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("nii"))
}

/// Reads a scalar volume from `.nii` or vraw, chosen by extension.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    if is_nifti(path) {
        read_nifti(path)
    } else {
        vraw::volume_from_vraw(read_vraw(path)?)
    }
}

/// Reads a label map; values must be non-negative integers.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    if is_nifti(path) {
        LabelMap::from_volume(&read_nifti(path)?)
    } else {
        vraw::labels_from_vraw(read_vraw(path)?)
    }
}

/// Writes a volume as `f32` vraw.
pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_volume_vraw(vol, path, Dtype::F32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FieldKind, GridShape, VectorField};

    #[test]
    fn dispatch_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let nii = dir.path().join("a.nii");
        let vals: Vec<f32> = (0..27).map(|i| (i % 3) as f32).collect();
        std::fs::write(&nii, encode_nifti_f32([3, 3, 3], &vals, true)).unwrap();
        let labels = read_labels(&nii).unwrap();
        assert_eq!(labels.labels(), vec![1, 2]);

        let vr = dir.path().join("a.vraw");
        write_labels_vraw(&labels, &vr).unwrap();
        assert_eq!(read_labels(&vr).unwrap(), labels);
        assert!(read_volume(&vr).is_ok());
        assert!(read_field(&vr, FieldKind::Displacement).is_err());

        let f = VectorField::from_fn(GridShape::new(2, 3, 4).unwrap(), FieldKind::Displacement, |x, y, z| {
            [x as f64 * 0.5, y as f64, -(z as f64)]
        });
        let fp = dir.path().join("f.vraw");
        write_field(&f, &fp).unwrap();
        assert_eq!(read_field(&fp, FieldKind::Displacement).unwrap(), f);
        assert!(matches!(read_volume(dir.path().join("missing.vraw")), Err(e) if e.is_io()));
    }
}
