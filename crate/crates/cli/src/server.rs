//! HTTP job API over a loaded scene and dataset. One stylization job runs
//! at a time on a worker thread; handlers only read cloned status.

use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use serde_json::json;
use splatstyle::controls::{ControlError, Point};
use splatstyle::pipeline::config::StylizeConfig;
use splatstyle::pipeline::io::{encode_png, CameraRecord, Dataset};
use splatstyle::pipeline::stylize::{IterationLog, Progress};
use splatstyle::pipeline::turntable::trajectory_pose;
use splatstyle::pipeline::PipelineError;
use splatstyle::render::rasterize;
use splatstyle::scene::{load_ply, GaussianScene};
use tiny_http::{Header, Method, Request, Response};

use crate::commands::CliError;
use crate::driver::{mask_path, run_stylize, save_masks, track_from};

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub host: String,
    pub port: u16,
    pub scene: PathBuf,
    pub cams: PathBuf,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobStatus {
    pub id: usize,
    pub state: JobState,
    pub iteration: usize,
    pub total: usize,
    pub count: usize,
    pub losses: Vec<IterationLog>,
    pub error: Option<String>,
    pub checksum: Option<String>,
}

struct Job {
    status: Mutex<JobStatus>,
    scene: Mutex<Arc<GaussianScene>>,
}

struct App {
    scene: Arc<GaussianScene>,
    data: Arc<Dataset>,
    workdir: PathBuf,
    jobs: Mutex<Vec<Arc<Job>>>,
    masks: Mutex<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskRequest {
    view_index: usize,
    points: Vec<Point>,
    tolerance: f64,
}

pub struct ServerHandle {
    port: u16,
    server: Arc<tiny_http::Server>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn port(&self) -> u16 {
        self.port
    }

    /// Stops accepting requests and waits for the listener thread.
    pub fn shutdown(mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Loads the scene and dataset and starts listening; port 0 picks a free
/// port.
pub fn start(opts: &ServerOptions) -> Result<ServerHandle, CliError> {
    let scene = load_ply(&opts.scene).map_err(PipelineError::from)?;
    let data = Dataset::load(&opts.cams)?;
    fs::create_dir_all(&opts.workdir).map_err(|e| PipelineError::io(&opts.workdir, e))?;
    let server = tiny_http::Server::http((opts.host.as_str(), opts.port)).map_err(|e| CliError::Server(e.to_string()))?;
    let port = server.server_addr().to_ip().map(|a| a.port()).unwrap_or(opts.port);
    let server = Arc::new(server);
    let app = Arc::new(App {
        scene: Arc::new(scene),
        data: Arc::new(data),
        workdir: opts.workdir.clone(),
        jobs: Mutex::new(Vec::new()),
        masks: Mutex::new(0),
    });
    let listener = Arc::clone(&server);
    let thread = std::thread::spawn(move || {
        for req in listener.incoming_requests() {
            handle(&app, req);
        }
    });
    Ok(ServerHandle {
        port,
        server,
        thread: Some(thread),
    })
}

pub fn serve(opts: &ServerOptions) -> Result<(), CliError> {
    let handle = start(opts)?;
    println!("listening on http://{}:{}", opts.host, handle.port());
    handle.join();
    Ok(())
}

type Reply = Response<std::io::Cursor<Vec<u8>>>;

fn json_reply(code: u16, value: &serde_json::Value) -> Reply {
    Response::from_data(value.to_string().into_bytes())
        .with_status_code(code)
        .with_header(Header::from_bytes("Content-Type", "application/json; charset=utf-8").expect("header"))
}

fn png_reply(bytes: Vec<u8>) -> Reply {
    Response::from_data(bytes).with_header(Header::from_bytes("Content-Type", "image/png").expect("header"))
}

fn error_reply(code: u16, msg: &str, field: Option<&str>) -> Reply {
    json_reply(code, &json!({ "error": msg, "field": field }))
}

/// Field named by a config message of the form `field: reason`.
fn field_of(msg: &str) -> Option<&str> {
    let (head, _) = msg.split_once(':')?;
    (!head.is_empty() && !head.contains(' ')).then_some(head)
}

fn pipeline_reply(e: &PipelineError) -> Reply {
    match e.root() {
        PipelineError::Config(msg) => error_reply(400, &e.to_string(), field_of(msg)),
        PipelineError::Control(ControlError::PointOutside(_)) => error_reply(400, &e.to_string(), Some("points")),
        PipelineError::Control(ControlError::Tolerance(_)) => error_reply(400, &e.to_string(), Some("tolerance")),
        PipelineError::Control(ControlError::Exhausted { .. }) => error_reply(422, &e.to_string(), None),
        _ => error_reply(500, &e.to_string(), None),
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(req: &mut Request) -> Result<T, Reply> {
    let mut body = String::new();
    if let Err(e) = req.as_reader().read_to_string(&mut body) {
        return Err(error_reply(400, &format!("body is not UTF-8: {e}"), None));
    }
    let de = &mut serde_json::Deserializer::from_str(&body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        // Unknown and missing fields are reported by the parent path; the
        // message itself names the field.
        let field = if path == "." {
            inner
                .to_string()
                .split('`')
                .nth(1)
                .map(str::to_string)
        } else {
            Some(path)
        };
        error_reply(400, &inner.to_string(), field.as_deref())
    })
}

fn handle(app: &Arc<App>, mut req: Request) {
    let url = req.url().to_string();
    let (path, query) = url.split_once('?').unwrap_or((&url, ""));
    let segs: Vec<&str> = path.trim_matches('/').split('/').collect();
    let reply = match (req.method(), segs.as_slice()) {
        (Method::Get, ["scene", "meta"]) => meta(app),
        (Method::Get, ["view", file]) => view(app, file),
        (Method::Post, ["mask"]) => match parse_body::<MaskRequest>(&mut req) {
            Ok(body) => mask(app, &body),
            Err(r) => r,
        },
        (Method::Get, ["mask", id, file]) => mask_file(app, id, file),
        (Method::Post, ["stylize"]) => match parse_body::<StylizeConfig>(&mut req) {
            Ok(cfg) => start_job(app, cfg),
            Err(r) => r,
        },
        (Method::Get, ["job", id]) => match job(app, id) {
            Some(j) => json_reply(200, &json!(*j.status.lock().expect("status lock"))),
            None => error_reply(404, "no such job", None),
        },
        (Method::Get, ["job", id, "frame"]) => frame(app, id, query),
        _ => error_reply(404, &format!("no route for {} {path}", req.method()), None),
    };
    if let Err(e) = req.respond(reply) {
        log::warn!("response failed: {e}");
    }
}

fn meta(app: &App) -> Reply {
    let cameras: &[CameraRecord] = &app.data.records;
    json_reply(
        200,
        &json!({
            "count": app.scene.len(),
            "sh_degree": app.scene.sh_degree(),
            "views": cameras.len(),
            "cameras": cameras,
        }),
    )
}

fn index_of(file: &str, n: usize) -> Option<usize> {
    file.strip_suffix(".png")?.parse::<usize>().ok().filter(|&i| i < n)
}

fn view(app: &App, file: &str) -> Reply {
    let Some(i) = index_of(file, app.data.records.len()) else {
        return error_reply(404, "no such view", None);
    };
    let path = app.data.dir.join(&app.data.records[i].file);
    match fs::read(&path) {
        Ok(bytes) => png_reply(bytes),
        Err(e) => error_reply(500, &format!("{}: {e}", path.display()), None),
    }
}

fn mask(app: &App, body: &MaskRequest) -> Reply {
    let masks = match track_from(&app.data.views, body.view_index, &body.points, body.tolerance) {
        Ok(m) => m,
        Err(e) => return pipeline_reply(&e),
    };
    let id = {
        let mut next = app.masks.lock().expect("mask lock");
        *next += 1;
        *next
    };
    let dir = app.workdir.join("masks").join(id.to_string());
    match save_masks(&dir, &app.data.records, &masks) {
        Ok(_) => json_reply(200, &json!({ "id": id, "dir": dir, "views": masks.len() })),
        Err(e) => pipeline_reply(&e),
    }
}

fn mask_file(app: &App, id: &str, file: &str) -> Reply {
    let (Ok(id), Some(i)) = (id.parse::<usize>(), index_of(file, app.data.records.len())) else {
        return error_reply(404, "no such mask", None);
    };
    let path = mask_path(&app.workdir.join("masks").join(id.to_string()), &app.data.records[i]);
    match fs::read(&path) {
        Ok(bytes) => png_reply(bytes),
        Err(_) => error_reply(404, "no such mask", None),
    }
}

fn job(app: &App, id: &str) -> Option<Arc<Job>> {
    let id = id.parse::<usize>().ok()?;
    app.jobs.lock().expect("jobs lock").get(id.checked_sub(1)?).cloned()
}

fn start_job(app: &Arc<App>, cfg: StylizeConfig) -> Reply {
    if let Err(e) = cfg.validate().and_then(|_| cfg.check_files()) {
        return pipeline_reply(&e);
    }
    let job = {
        let mut jobs = app.jobs.lock().expect("jobs lock");
        if jobs.iter().any(|j| j.status.lock().expect("status lock").state == JobState::Running) {
            return error_reply(409, "a job is already running", None);
        }
        let job = Arc::new(Job {
            status: Mutex::new(JobStatus {
                id: jobs.len() + 1,
                state: JobState::Running,
                iteration: 0,
                total: cfg.stage2_iterations,
                count: app.scene.len(),
                losses: Vec::new(),
                error: None,
                checksum: None,
            }),
            scene: Mutex::new(Arc::clone(&app.scene)),
        });
        jobs.push(Arc::clone(&job));
        job
    };
    let id = job.status.lock().expect("status lock").id;
    let app = Arc::clone(app);
    std::thread::spawn(move || {
        let out = app.workdir.join("jobs").join(id.to_string());
        let result = run_stylize(&app.scene, &app.data, &cfg, Some(&out), &mut |p| {
            match p {
                Progress::Stage1Done { scene } => job.status.lock().expect("status lock").count = scene.len(),
                Progress::Iteration { log, scene, .. } => {
                    *job.scene.lock().expect("scene lock") = Arc::new((*scene).clone());
                    let mut s = job.status.lock().expect("status lock");
                    s.iteration = log.iteration;
                    s.losses.push(*(*log));
                }
            }
            true
        });
        match result {
            Ok((scene, report)) => {
                *job.scene.lock().expect("scene lock") = Arc::new(scene);
                let mut s = job.status.lock().expect("status lock");
                s.state = JobState::Done;
                s.count = report.count_after_stage1;
                s.checksum = Some(format!("{:016x}", report.checksum));
            }
            Err(e) => {
                log::error!("job {id}: {e}");
                let mut s = job.status.lock().expect("status lock");
                s.state = JobState::Failed;
                s.error = Some(e.to_string());
            }
        }
    });
    json_reply(200, &json!({ "id": id }))
}

fn frame(app: &App, id: &str, query: &str) -> Reply {
    let Some(job) = job(app, id) else {
        return error_reply(404, "no such job", None);
    };
    let t = match query.split('&').find_map(|kv| kv.strip_prefix("pose_t=")) {
        None => 0.0,
        Some(v) => match v.parse::<f64>() {
            Ok(t) => t,
            Err(_) => return error_reply(400, &format!("pose_t: `{v}` is not a number"), Some("pose_t")),
        },
    };
    let cam = match trajectory_pose(&app.data.cameras, t) {
        Ok(c) => c,
        Err(e) => return pipeline_reply(&e),
    };
    let scene = Arc::clone(&job.scene.lock().expect("scene lock"));
    match rasterize(&scene, &cam) {
        Ok(r) => png_reply(encode_png(&r.color)),
        Err(e) => error_reply(500, &e.to_string(), None),
    }
}
