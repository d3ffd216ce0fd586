// Payload shapes of the /api/v1 service, mirroring docs/api_v1.json.

export interface SchemaDoc {
  names: string[];
  palette: [number, number, number][];
  task: "segmentation" | "keypoints";
}

export interface ProjectInfo {
  schema: SchemaDoc;
  backbone: Record<string, unknown>;
  n_samples: number;
  n_annotated: number;
  n_checkpoints: number;
}

export interface SampleInfo {
  id: number;
  annotated: boolean;
}

export type CandidateStatus = "proposed" | "accepted" | "annotated" | "skipped";

export interface RoundParams {
  k_percent: number;
  band_width: number;
  n_centers: number;
  seed_id: number;
  chosen_ids: number[];
  human_confirmed: number[];
  confirm_limit: number;
  embedding_kind: string;
}

export interface RoundDoc {
  id: number;
  round: RoundParams;
  statuses: Record<string, CandidateStatus>;
  created_at: string;
  bootstrap?: boolean;
}

export interface PolygonPayload {
  label: string;
  vertices: [number, number][];
}

export interface AnnotationPayload {
  sample_id: number;
  annotator: string;
  polygons: PolygonPayload[];
  keypoints: [string, number, number][];
}

export interface AnnotationReceipt {
  sample_id: number;
  mask_sha256: string;
  mask_url: string;
  pixels_per_label: Record<string, number>;
}

export interface RetrainStatus {
  running: boolean;
  progress: string;
  last_error: string | null;
  checkpoints: string[];
}

export interface MetricRecord {
  dataset: string;
  metric: string;
  value: number;
  std: number;
  tag: string;
}

export interface NextRoundOverrides {
  k_percent?: number;
  band_width?: number;
  n_centers?: number;
}
