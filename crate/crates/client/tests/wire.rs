use haze_client::{ApiError, RestoreResponse, VariantInfo, VariantStatus};

#[test]
fn restore_response_without_metrics() {
    let r: RestoreResponse =
        serde_json::from_str(r#"{"job_id":"ab","restored_image_url":"/api/artifacts/ab","psnr_db":null,"ssim":null}"#)
            .unwrap();
    assert_eq!(r.psnr_db, None);
    assert_eq!(r.ssim, None);
}

#[test]
fn variant_status_is_snake_case() {
    let v = VariantInfo {
        k: 25,
        status: VariantStatus::Unavailable,
        ssim_reported: Some(0.9),
        psnr_reported: None,
    };
    let json = serde_json::to_value(&v).unwrap();
    assert_eq!(json["status"], "unavailable");
    assert_eq!(serde_json::from_value::<VariantInfo>(json).unwrap(), v);
}

#[test]
fn api_error_shape() {
    let e: ApiError = serde_json::from_str(r#"{"code":"unknown_variant","message":"no"}"#).unwrap();
    assert_eq!(e.code, "unknown_variant");
}
