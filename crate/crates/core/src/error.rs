use thiserror::Error;

use crate::chord::NodeId;
use crate::ontology::OntologyId;
use crate::overlay::PeerId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("ontology graph is not connected")]
    DisconnectedGraph,
    #[error("unknown ontology {0}")]
    UnknownOntology(OntologyId),
    #[error("no mapping link between {0} and {1}")]
    NoMappingLink(OntologyId, OntologyId),
    #[error("malformed path: {0}")]
    MalformedPath(String),
    #[error("invalid ontology graph: {0}")]
    InvalidGraph(String),
    #[error("node {0} is not a member of the ring")]
    UnknownNode(NodeId),
    #[error("node {0} is already a member of the ring")]
    DuplicateNode(NodeId),
    #[error("peer {0} is the only live peer of its virtual organization")]
    SoleSurvivorVo(PeerId),
    #[error("virtual organization {0} is disconnected")]
    VoDisconnected(OntologyId),
    #[error("unknown peer {0}")]
    UnknownPeer(PeerId),
    #[error("invalid scenario: {field}: {reason}")]
    ScenarioInvalid { field: String, reason: String },
    #[error("unknown figure `{0}`")]
    UnknownFigure(String),
    #[error("csv schema mismatch: {0}")]
    SchemaMismatch(String),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::ScenarioInvalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
