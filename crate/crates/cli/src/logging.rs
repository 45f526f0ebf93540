//! Line-delimited JSON logs on stderr: `{"ts", "level", "stage", "message"}`.

use std::io::Write;

use log::LevelFilter;

pub fn init(level: LevelFilter) {
    env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .format(|buf, record| {
            let line = serde_json::json!({
                "ts": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                "level": record.level().as_str().to_ascii_lowercase(),
                "stage": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}
