//! Distributed runtime: parameter server, workers, transports, samples.

pub mod protocol;
pub mod server;
pub mod store;
pub mod transport;
pub mod worker;

pub use protocol::{Message, RoundReply, RoundRequest, SubParameters};
pub use server::{
    build_workers, check_disjoint_writes, init_chain, run_in_process, run_server, ChainReport,
    Mode, RoundEvent, RunOutput, ScheduleEntry, ServerConfig,
};
pub use store::{check_burn_in, BurnInDetector, SampleStore, Snapshot};
pub use transport::{InProcessTransport, Pending, SocketTransport, Transport};
pub use worker::{sample_minibatch, worker_round, Worker};
