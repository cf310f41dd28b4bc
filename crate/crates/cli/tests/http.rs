use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::response::Response;
use nowcast_xai::service::{run_pipeline, RunConfig, Store};
use nowcast_xai_cli::{app, select_served, AppState};
use tower::ServiceExt;

async fn get(state: &AppState, uri: &str, etag: Option<&str>) -> Response {
    let mut req = Request::get(uri);
    if let Some(t) = etag {
        req = req.header(header::IF_NONE_MATCH, t);
    }
    app(state.clone()).oneshot(req.body(Body::empty()).unwrap()).await.unwrap()
}

async fn body(r: Response) -> serde_json::Value {
    serde_json::from_slice(&to_bytes(r.into_body(), usize::MAX).await.unwrap()).unwrap()
}

#[tokio::test]
async fn empty_store_lists_no_cases() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let selected = select_served(&store, None).unwrap();
    assert_eq!(selected, None);
    let state = AppState::new(store, None).unwrap();
    let r = get(&state, "/v1/cases", None).await;
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(body(r).await, serde_json::json!([]));
    assert_eq!(get(&state, "/v1/performance", None).await.status(), StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn done_run_is_served_with_revalidation() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let rec = tokio::task::spawn_blocking({
        let store = store.clone();
        move || run_pipeline(&store, &RunConfig::smoke()).unwrap()
    })
    .await
    .unwrap();
    let selected = select_served(&store, None).unwrap();
    assert_eq!(selected.as_deref(), Some(rec.run_id.as_str()));
    let state = AppState::new(store, selected.as_deref()).unwrap();

    let r = get(&state, "/v1/cases", None).await;
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.headers()[header::CONTENT_TYPE], "application/json");
    let tag = r.headers()[header::ETAG].to_str().unwrap().to_string();
    let cases = body(r).await;
    let id = cases[0]["id"].as_str().unwrap().to_string();

    let again = get(&state, "/v1/cases", Some(&tag)).await;
    assert_eq!(again.status(), StatusCode::NOT_MODIFIED);
    assert_eq!(get(&state, "/v1/cases", Some("\"stale\"")).await.status(), StatusCode::OK);

    let grid = get(&state, &format!("/v1/grids/{id}/mask"), None).await;
    assert_eq!(grid.status(), StatusCode::OK);
    assert_eq!(grid.headers()[header::CONTENT_TYPE], "application/octet-stream");

    let bad = get(&state, &format!("/v1/explain/{id}?lead=1&class=7"), None).await;
    assert_eq!(bad.status(), StatusCode::BAD_REQUEST);
    assert_eq!(get(&state, "/v1/cases/unknown", None).await.status(), StatusCode::NOT_FOUND);

    let post = app(state.clone())
        .oneshot(Request::post("/v1/cases").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(post.status(), StatusCode::METHOD_NOT_ALLOWED);
}
