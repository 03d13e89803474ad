//! Per-image annotation time from a UI event log.

use iml3d::interaction_log::{durations, read_events, AnnotationPeriod, EventKind, EventLog, InteractionEvent, INACTIVITY_THRESHOLD};

fn main() -> iml3d::Result<()> {
    use EventKind::*;
    let events = [
        (0.0, OpenFile, "a"),
        (4.0, AxialSliceChange, "a"),
        (9.5, MouseDown, "a"),
        (11.0, MouseRelease, "a"),
        (13.0, Save, "a"),
        (14.0, OpenFile, "b"),
        (18.0, ZoomChange, "b"),
        // Coffee break: this 40 s gap is not counted.
        (58.0, MouseDown, "b"),
        (61.0, Save, "b"),
        (62.0, OpenFile, "c"),
        (70.0, Save, "c"),
    ]
    .map(|(t, k, id)| InteractionEvent::new(t, k, id));

    let dir = tempfile::tempdir().expect("temp dir");
    let mut log = EventLog::for_session(dir.path(), "demo")?;
    for e in &events {
        log.record(e)?;
    }
    let back = read_events(log.path())?;
    println!("{} events in {}", back.len(), log.path().display());
    println!("{}", std::fs::read_to_string(log.path()).expect("log").lines().take(3).collect::<Vec<_>>().join("\n"));

    let all = [AnnotationPeriod::new(0.0, 100.0)?];
    for (id, secs) in durations(&back, &all, INACTIVITY_THRESHOLD) {
        println!("{id}: {secs:.1} s");
    }
    // Only events inside an annotation period are considered.
    let morning = [AnnotationPeriod::new(0.0, 20.0)?];
    println!("first 20 s only: {:?}", durations(&back, &morning, INACTIVITY_THRESHOLD));
    Ok(())
}
