use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, SystemTime};

use candle_core::DType;
use haze_client::{Client, RestoreRequest, VariantStatus};
use haze_core::checkpoint::{file_name, Checkpoint};
use haze_core::ffa::{Ffa, FfaConfig};
use haze_core::grid::ReportedManifest;
use haze_core::training::{Phase, ALLOWED_K};
use haze_service::{job_id, serve, AppState, ArtifactStore, ServiceConfig};

fn write_variants(dir: &Path, ks: &[usize], zero: bool) {
    for &k in ks {
        let g = Ffa::new(FfaConfig::tiny(), k as u64, DType::F32).unwrap();
        if zero {
            g.params().zero_all().unwrap();
        }
        let variant = format!("k{k}");
        Checkpoint::from_generator(Phase::Finetune, &variant, &g)
            .unwrap()
            .save(&dir.join(file_name(Phase::Finetune, &variant, 1)))
            .unwrap();
    }
}

fn png(seed: u8, w: u32, h: u32) -> Vec<u8> {
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        image::Rgb([
            (x as u8).wrapping_mul(9).wrapping_add(seed),
            (y as u8).wrapping_mul(5),
            ((x * y) as u8).wrapping_add(seed),
        ])
    });
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png).unwrap();
    out
}

struct Harness {
    client: Client,
    _dirs: (tempfile::TempDir, tempfile::TempDir),
}

async fn start(ks: &[usize], manifest: bool, zero: bool, tweak: impl FnOnce(&mut ServiceConfig)) -> Harness {
    let ckpt = tempfile::tempdir().unwrap();
    let artifacts = tempfile::tempdir().unwrap();
    write_variants(ckpt.path(), ks, zero);
    if manifest {
        ReportedManifest::default().write(ckpt.path()).unwrap();
    }
    let mut cfg = ServiceConfig::new(ckpt.path(), artifacts.path());
    tweak(&mut cfg);
    let state = Arc::new(AppState::new(cfg).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, state));
    Harness {
        client: Client::new(format!("http://{addr}")),
        _dirs: (ckpt, artifacts),
    }
}

#[tokio::test]
async fn variants_report_status_and_reference_numbers() {
    let h = start(&ALLOWED_K, true, false, |_| {}).await;
    let list = h.client.variants().await.unwrap();
    assert_eq!(list.iter().map(|v| v.k).collect::<Vec<_>>(), ALLOWED_K);
    assert!(list.iter().all(|v| v.status == VariantStatus::Ready));
    assert_eq!(list[0].ssim_reported, Some(0.9084));
    assert_eq!(list[0].psnr_reported, Some(19.16));
}

#[tokio::test]
async fn missing_checkpoint_is_unavailable_not_fatal() {
    let h = start(&[25, 20, 5, 0], false, false, |_| {}).await;
    let list = h.client.variants().await.unwrap();
    let ten = list.iter().find(|v| v.k == 10).unwrap();
    assert_eq!(ten.status, VariantStatus::Unavailable);
    assert!(list.iter().all(|v| v.ssim_reported.is_none() && v.psnr_reported.is_none()));
    let err = h.client.restore(RestoreRequest::new(png(1, 40, 30), 10)).await.unwrap_err();
    assert_eq!(err.status(), Some(503));
    assert_eq!(err.code(), Some("variant_unavailable"));
    h.client.restore(RestoreRequest::new(png(1, 40, 30), 5)).await.unwrap();
}

#[tokio::test]
async fn metrics_present_iff_reference_uploaded() {
    let h = start(&ALLOWED_K, true, false, |_| {}).await;
    let image = png(3, 64, 48);
    let bare = h.client.restore(RestoreRequest::new(image.clone(), 25)).await.unwrap();
    assert_eq!((bare.psnr_db, bare.ssim), (None, None));
    let with_ref = h
        .client
        .restore(RestoreRequest::new(image.clone(), 25).with_reference(png(4, 64, 48)))
        .await
        .unwrap();
    let (p, s) = (with_ref.psnr_db.unwrap(), with_ref.ssim.unwrap());
    assert!(p.is_finite() && (-1.0..=1.0).contains(&s));
    assert_eq!(bare.job_id, with_ref.job_id);
    assert_eq!(bare.job_id, job_id(&image, 25));
}

#[tokio::test]
async fn repeated_uploads_return_identical_bytes() {
    let h = start(&ALLOWED_K, false, false, |_| {}).await;
    let image = png(7, 80, 60);
    let a = h.client.restore(RestoreRequest::new(image.clone(), 20)).await.unwrap();
    let first = h.client.artifact(&a.restored_image_url).await.unwrap();
    let decoded = image::load_from_memory(&first).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (256, 256));

    let handles: Vec<_> = (0..3)
        .map(|_| {
            let (client, image) = (h.client.clone(), image.clone());
            tokio::spawn(async move { client.restore(RestoreRequest::new(image, 20)).await })
        })
        .collect();
    for handle in handles {
        let r = handle.await.unwrap().unwrap();
        assert_eq!(r.job_id, a.job_id);
        assert_eq!(h.client.artifact(&r.restored_image_url).await.unwrap(), first);
    }
    let other = h.client.restore(RestoreRequest::new(image, 10)).await.unwrap();
    assert_ne!(other.job_id, a.job_id);
}

#[tokio::test]
async fn identity_variant_scores_perfectly_against_its_input() {
    let h = start(&[0], false, true, |_| {}).await;
    let image = png(9, 256, 256);
    let r = h
        .client
        .restore(RestoreRequest::new(image.clone(), 0).with_reference(image))
        .await
        .unwrap();
    assert_eq!(r.ssim, Some(1.0));
    assert_eq!(r.psnr_db, Some(100.0));
}

#[tokio::test]
async fn unknown_variant_lists_allowed_set() {
    let h = start(&ALLOWED_K, false, false, |_| {}).await;
    let err = h.client.restore(RestoreRequest::new(png(1, 32, 32), 7)).await.unwrap_err();
    assert_eq!(err.status(), Some(404));
    assert_eq!(err.code(), Some("unknown_variant"));
    assert!(err.to_string().contains("[25, 20, 10, 5, 0]"), "{err}");
}

#[tokio::test]
async fn malformed_requests_are_bad_requests() {
    let h = start(&ALLOWED_K, false, false, |c| c.max_upload = 4096).await;
    let cases = [
        (RestoreRequest::new(b"not an image".to_vec(), 25), "unsupported_format"),
        (RestoreRequest::new(png(1, 32, 32), 25).with_reference(b"junk".to_vec()), "unsupported_format"),
        (RestoreRequest::new(png(1, 200, 200), 25), "too_large"),
        (
            RestoreRequest {
                variant: "many".into(),
                ..RestoreRequest::new(png(1, 32, 32), 25)
            },
            "invalid_variant",
        ),
    ];
    for (req, code) in cases {
        let err = h.client.restore(req).await.unwrap_err();
        assert_eq!(err.status(), Some(400), "{err}");
        assert_eq!(err.code(), Some(code));
    }
}

#[tokio::test]
async fn missing_artifact_is_not_found() {
    let h = start(&[], false, false, |_| {}).await;
    for id in ["0".repeat(64), "../../etc/passwd".into(), "abc".into()] {
        let err = h.client.artifact(&format!("/api/artifacts/{id}")).await.unwrap_err();
        assert_eq!(err.status(), Some(404));
    }
}

#[test]
fn sweep_removes_expired_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::new(dir.path(), Duration::from_secs(60)).unwrap();
    let id = "a".repeat(64);
    store.put(&id, b"png").unwrap();
    assert_eq!(store.sweep(SystemTime::now()).unwrap(), 0);
    assert_eq!(store.get(&id).unwrap(), b"png");
    assert_eq!(store.sweep(SystemTime::now() + Duration::from_secs(120)).unwrap(), 1);
    assert!(store.get(&id).is_none());
}

#[test]
fn non_cpu_device_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ServiceConfig::new(dir.path(), dir.path().join("a"));
    cfg.device = "cuda:0".into();
    assert!(AppState::new(cfg).is_err());
}
