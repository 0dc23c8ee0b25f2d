//! Client for the restoration service, plus the JSON types it exchanges.

use serde::{Deserialize, Serialize};

pub const DEFAULT_PORT: u16 = 8080;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreResponse {
    pub job_id: String,
    /// Path relative to the service root, e.g. `/api/artifacts/<id>`.
    pub restored_image_url: String,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantStatus {
    Ready,
    Unavailable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantInfo {
    pub k: usize,
    pub status: VariantStatus,
    /// Reference numbers shipped with the manifest, not measured by the service.
    pub ssim_reported: Option<f64>,
    pub psnr_reported: Option<f64>,
}

/// Body of every non-2xx response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("{status} {}: {}", .error.code, .error.message)]
    Api { status: u16, error: ApiError },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Http(e) => e.status().map(|s| s.as_u16()),
        }
    }

    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { error, .. } => Some(&error.code),
            ClientError::Http(_) => None,
        }
    }
}

/// One upload. `variant` is sent verbatim so malformed values can be exercised.
#[derive(Clone, Debug)]
pub struct RestoreRequest {
    pub image: Vec<u8>,
    pub file_name: String,
    pub variant: String,
    pub reference: Option<Vec<u8>>,
}

impl RestoreRequest {
    pub fn new(image: Vec<u8>, k: usize) -> Self {
        Self {
            image,
            file_name: "upload.png".into(),
            variant: k.to_string(),
            reference: None,
        }
    }

    pub fn with_reference(mut self, reference: Vec<u8>) -> Self {
        self.reference = Some(reference);
        self
    }
}

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub async fn variants(&self) -> Result<Vec<VariantInfo>, ClientError> {
        let resp = self.http.get(format!("{}/api/variants", self.base)).send().await?;
        decode(resp).await
    }

    pub async fn restore(&self, req: RestoreRequest) -> Result<RestoreResponse, ClientError> {
        use reqwest::multipart::{Form, Part};
        let mut form = Form::new()
            .part("image", Part::bytes(req.image).file_name(req.file_name))
            .text("variant", req.variant);
        if let Some(reference) = req.reference {
            form = form.part("reference", Part::bytes(reference).file_name("reference.png"));
        }
        let resp = self
            .http
            .post(format!("{}/api/restore", self.base))
            .multipart(form)
            .send()
            .await?;
        decode(resp).await
    }

    /// Fetches an artifact by the URL returned from [`Client::restore`].
    pub async fn artifact(&self, url: &str) -> Result<Vec<u8>, ClientError> {
        let full = if url.starts_with("http://") || url.starts_with("https://") {
            url.to_string()
        } else {
            format!("{}{url}", self.base)
        };
        let resp = self.http.get(full).send().await?;
        if !resp.status().is_success() {
            return Err(api_error(resp).await);
        }
        Ok(resp.bytes().await?.to_vec())
    }
}

async fn decode<T: serde::de::DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
    if resp.status().is_success() {
        Ok(resp.json().await?)
    } else {
        Err(api_error(resp).await)
    }
}

async fn api_error(resp: reqwest::Response) -> ClientError {
    let status = resp.status().as_u16();
    let body = match resp.bytes().await {
        Ok(b) => b,
        Err(e) => return ClientError::Http(e),
    };
    let error = serde_json::from_slice(&body).unwrap_or_else(|_| ApiError {
        code: "unexpected_response".into(),
        message: String::from_utf8_lossy(&body).into_owned(),
    });
    ClientError::Api { status, error }
}
