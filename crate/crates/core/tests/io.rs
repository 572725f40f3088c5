use ndarray::{Array3, Array4};

use cascade_unet::nifti::{self, VoxelData};
use cascade_unet::phantom::{generate_phantom, PhantomSpec};
use cascade_unet::volume::{
    list_case_dirs, load_case, read_intensity, read_labels, save_case, write_intensity, write_labels, Grid,
    MultiModalCase,
};
use cascade_unet::Error;

fn ramp(shape: (usize, usize, usize)) -> Array3<f32> {
    Array3::from_shape_fn(shape, |(x, y, z)| x as f32 * 100.0 + y as f32 * 10.0 + z as f32 - 0.25)
}

#[test]
fn intensity_round_trip_plain_and_gzip() {
    let dir = tempfile::tempdir().unwrap();
    let v = ramp((5, 4, 3));
    let grid = Grid::new([5, 4, 3], [1.0, 1.5, 2.0]);
    for name in ["v.nii", "v.nii.gz"] {
        let path = dir.path().join(name);
        write_intensity(&path, v.view(), &grid).unwrap();
        let (back, g) = read_intensity(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(g, grid);
    }
}

#[test]
fn axis_order_is_first_index_fastest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("o.nii");
    let v = ramp((3, 2, 2));
    write_intensity(&path, v.view(), &Grid::new([3, 2, 2], [1.0; 3])).unwrap();
    let img = nifti::read(&path).unwrap();
    assert_eq!(img.values[1], v[[1, 0, 0]] as f64);
    assert_eq!(img.values[3], v[[0, 1, 0]] as f64);
}

#[test]
fn labels_round_trip_and_reject_unknown_values() {
    let dir = tempfile::tempdir().unwrap();
    let labels = Array3::from_shape_fn((4, 4, 4), |(x, y, _)| [0u8, 1, 2, 4][(x + y) % 4]);
    let grid = Grid::new([4, 4, 4], [1.0; 3]);
    let path = dir.path().join("s.nii.gz");
    write_labels(&path, labels.view(), &grid).unwrap();
    assert_eq!(read_labels(&path).unwrap().0, labels);

    let bad = dir.path().join("bad.nii");
    let mut values = vec![0u8; 64];
    values[7] = 3;
    nifti::write(&bad, [4, 4, 4], [1.0; 3], &grid.affine, &VoxelData::U8(values)).unwrap();
    assert!(matches!(read_labels(&bad), Err(Error::LabelValue(3))));
}

#[test]
fn case_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = generate_phantom("case_a", &PhantomSpec::standard([12, 10, 8], 1)).unwrap();
    let case_dir = save_case(&p.case, dir.path()).unwrap();
    let back = load_case(&case_dir).unwrap();
    assert_eq!(back, p.case);
    assert_eq!(list_case_dirs(dir.path()).unwrap(), vec![case_dir]);
}

#[test]
fn missing_modality_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = generate_phantom("c", &PhantomSpec::standard([8; 3], 2)).unwrap();
    let case_dir = save_case(&p.case, dir.path()).unwrap();
    std::fs::remove_file(case_dir.join("c_flair.nii.gz")).unwrap();
    let err = load_case(&case_dir).unwrap_err();
    assert!(matches!(err, Error::MissingModality { .. }), "{err}");
    assert_eq!(err.category(), "input");
}

#[test]
fn mismatched_grids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = generate_phantom("c", &PhantomSpec::standard([8; 3], 3)).unwrap();
    let case_dir = save_case(&p.case, dir.path()).unwrap();
    write_intensity(&case_dir.join("c_t2.nii.gz"), ramp((8, 8, 6)).view(), &Grid::new([8, 8, 6], [1.0; 3])).unwrap();
    assert!(matches!(load_case(&case_dir), Err(Error::GridMismatch { .. })));

    let channels = Array4::<f32>::zeros((4, 8, 8, 8));
    let labels = Array3::<u8>::zeros((8, 8, 7));
    let err = MultiModalCase::new("x", channels, Some(labels), Grid::new([8; 3], [1.0; 3])).unwrap_err();
    assert!(matches!(err, Error::GridMismatch { .. }));
}

#[test]
fn truncated_file_is_an_error_not_a_panic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.nii");
    write_intensity(&path, ramp((4, 4, 4)).view(), &Grid::new([4; 3], [1.0; 3])).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(read_intensity(&path).is_err());
    std::fs::write(&path, &bytes[..100]).unwrap();
    assert!(read_intensity(&path).is_err());
}
