//! The shared state store: a sequencer server and a few clients that
//! register, update and deregister. Every replica converges on the same map
//! and an observer sees a gapless update history.

use std::time::Duration;

use stream4d::statestore::{ClientOptions, ClientState, NodeKind, NodeStatus, ServerOptions, StateClient, StateServer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let server = StateServer::bind("127.0.0.1:0", ServerOptions::default())?;
    let addr = server.local_addr().to_string();
    let observer = StateClient::connect(
        &addr,
        ClientOptions {
            record_history: true,
            heartbeat: Duration::ZERO,
            ..Default::default()
        },
    )?;

    let clients: Vec<StateClient> = (0..3)
        .map(|i| {
            let c = StateClient::connect(&addr, ClientOptions::default())?;
            c.register(ClientState::new(format!("ng-{i:02}"), NodeKind::NodeGroup))?;
            Ok(c)
        })
        .collect::<Result<_, Box<dyn std::error::Error>>>()?;
    for (i, c) in clients.iter().enumerate() {
        c.update(|s| {
            s.scan_number = 7;
            s.expected_messages = 100 * (i as u64 + 1);
        })?;
        c.set_status(NodeStatus::Streaming)?;
    }
    clients[2].deregister()?;

    let target = clients[2].last_sequence();
    for c in clients.iter().chain([&observer]) {
        c.wait_for_sequence(target, Duration::from_secs(5));
    }
    let reference = observer.map();
    for c in &clients {
        assert_eq!(c.map(), reference);
    }
    for (uid, s) in &reference {
        println!("{uid}: {:?} scan {} expecting {}", s.status, s.scan_number, s.expected_messages);
    }
    println!(
        "active NodeGroups: {:?}; observer saw {} updates with {} gaps",
        observer.active_nodegroups(),
        observer.history().len(),
        observer.gap_count()
    );
    Ok(())
}
