use linattn_cli::image::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, load_image, save_image};
use linattn_core::{Error, Tensor};

#[test]
fn hand_written_ppm_decodes_to_scaled_values() {
    let mut bytes = b"P6\n# two by two\n2 2\n255\n".to_vec();
    bytes.extend([0, 51, 255, 10, 20, 30, 255, 0, 0, 1, 2, 3]);
    let t = decode_ppm::<f64>(&bytes).unwrap();
    assert_eq!(t.shape(), &[3, 2, 2]);
    let want = [0, 10, 255, 1, 51, 20, 0, 2, 255, 30, 0, 3].map(|v| v as f64 / 255.0);
    assert_eq!(t.data(), &want);
}

fn data_offset(e: Error) -> String {
    match e {
        Error::Data(msg) => msg,
        other => panic!("expected a data error, got {other}"),
    }
}

#[test]
fn malformed_files_report_byte_offsets() {
    let truncated = b"P6\n2 2\n255\n\x00\x01\x02".to_vec();
    assert!(data_offset(decode_ppm::<f32>(&truncated).unwrap_err()).starts_with("byte 14:"));
    assert!(data_offset(decode_ppm::<f32>(b"P3\n1 1\n255\n").unwrap_err()).starts_with("byte 0:"));
    assert!(data_offset(decode_ppm::<f32>(b"P6\n1 x\n255\n").unwrap_err()).starts_with("byte 5:"));
    let msg = data_offset(decode_pgm(b"P5\n1 1\n2\n\x03").unwrap_err());
    assert!(msg.starts_with("byte 9:"), "{msg}");
    assert!(decode_pgm(b"P5\n2 1\n255\n\x00\x00\x00").is_err());
}

#[test]
fn wide_maxval_is_rejected() {
    assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    assert!(decode_ppm::<f32>(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
}

#[test]
fn round_trips_are_bit_exact() {
    let labels = vec![0, 1, 2, 2, 1, 0];
    let bytes = encode_pgm(2, 3, &labels).unwrap();
    assert_eq!(decode_pgm(&bytes).unwrap(), (2, 3, labels));

    let img = Tensor::<f64>::from_fn(&[3, 4, 5], |i| ((i * 37) % 256) as f64 / 255.0);
    let bytes = encode_ppm(&img).unwrap();
    assert_eq!(decode_ppm::<f64>(&bytes).unwrap(), img);
    assert_eq!(encode_ppm(&decode_ppm::<f64>(&bytes).unwrap()).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ppm");
    save_image(&path, &img).unwrap();
    assert_eq!(load_image::<f64>(&path).unwrap(), img);
}
