//! Renders a walk through simulator screens as a frame-directory recording.
//!
//! ```text
//! cargo run -p scenereplay-core --example sim_recording -- APP.json OUT_DIR HOLD SCREEN...
//! ```
//!
//! Writes `OUT_DIR/frames/NNNNNN.png` and prints each screen's raster
//! fingerprint (the key used by the scripted OCR and detector fixtures).

use std::path::PathBuf;

use scenereplay::device::load_sim_app;
use scenereplay::recording::fingerprint;
use scenereplay::synth::sim_walk;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 4 {
        eprintln!("usage: sim_recording APP.json OUT_DIR HOLD SCREEN...");
        std::process::exit(2);
    }
    let app = load_sim_app(&PathBuf::from(&args[0]))?;
    let out = PathBuf::from(&args[1]);
    let hold: usize = args[2].parse()?;
    let screens: Vec<&str> = args[3..].iter().map(String::as_str).collect();
    let recording = sim_walk(&app, &screens, hold, 30.0)?;
    let dir = recording.write_frame_cache(&out)?;
    println!("{} frames in {}", recording.len(), dir.display());
    for id in &screens {
        println!("{id}\t{}", fingerprint(&app.raster(id)?));
    }
    Ok(())
}
