use std::io::Write;

use anyhow::Result;
use ev_trilevel::scenario::Scenario;
use ev_trilevel::transport::ChargeDecision;

/// One row per class path: id, class, origin, hub, charging decision, length
/// and the arc ids in driving order (space separated).
pub fn write_paths<W: Write>(out: W, scenario: &Scenario) -> Result<()> {
    let t = scenario.problem.scenario();
    let set = scenario.problem.paths();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path_id", "class", "origin", "hub", "decision", "length_km", "arcs"])?;
    for p in &set.paths {
        let decision = match p.decision {
            ChargeDecision::AtHub => "at_hub",
            ChargeDecision::Later => "later",
            ChargeDecision::NotApplicable => "none",
        };
        let arcs: Vec<String> = set.routes[p.route].arcs.iter().map(|&a| t.arcs()[a].id.to_string()).collect();
        w.write_record([
            p.id.to_string(),
            t.classes()[p.class].tag.label().to_string(),
            t.demands()[p.od].origin.to_string(),
            t.hubs()[p.hub].id.to_string(),
            decision.to_string(),
            p.length_km.to_string(),
            arcs.join(" "),
        ])?;
    }
    w.flush()?;
    Ok(())
}
